import numpy as np
import pytest

from geotrot.terrain import (
    CellClass,
    HeightMap,
    NoFeasibleFoothold,
    TerrainScenario,
    classify,
    generate_terrain,
    load_terrain,
    plan_foothold,
    save_terrain,
)


def flat_map(nx=200, ny=100, res=0.01):
    return HeightMap(np.array([0.0, -ny * res / 2, 0.0]), res, np.zeros((nx, ny)))


def one_gap_map(gap_start=1.0, gap_len=0.10, nx=300, ny=100, res=0.01):
    elev = np.zeros((nx, ny))
    xs = (np.arange(nx) + 0.5) * res
    band = (xs >= gap_start) & (xs < gap_start + gap_len)
    elev[band, :] = -0.3
    return HeightMap(np.array([0.0, -ny * res / 2, 0.0]), res, elev)


def test_aligned_single_gap_band():
    sc = TerrainScenario("aligned", seed=1, length=1.2, gap_range=(0.10, 0.10))
    hm = generate_terrain(sc)
    xs = hm.origin[0] + (np.arange(hm.shape[0]) + 0.5) * hm.resolution
    gap_cols = np.where((hm.elevation < -0.1).any(axis=1))[0]
    assert gap_cols.size > 0
    # each gap band spans the full lateral extent and is 0.10 m wide
    runs = np.split(gap_cols, np.where(np.diff(gap_cols) > 1)[0] + 1)
    for run in runs:
        assert (hm.elevation[run, :] == -0.3).all()
        assert abs(run.size * hm.resolution - 0.10) <= 2 * hm.resolution


def test_terrain_determinism_bit_identical():
    sc = TerrainScenario("random", seed=42)
    a = generate_terrain(sc)
    b = generate_terrain(sc)
    assert np.array_equal(a.elevation, b.elevation)
    c = generate_terrain(TerrainScenario("random", seed=43))
    assert not np.array_equal(a.elevation, c.elevation)


def test_staggered_tracks_differ():
    sc = TerrainScenario("staggered", seed=3)
    hm = generate_terrain(sc)
    ny = hm.shape[1]
    left = hm.elevation[:, ny // 2 + 5]
    right = hm.elevation[:, ny // 2 - 5]
    assert not np.array_equal(left, right)


def test_classify_flat_all_steppable():
    mask = classify(flat_map())
    assert (mask.classes == int(CellClass.STEPPABLE)).all()


def test_classify_margin_band_width():
    res = 0.01
    hm = one_gap_map(res=res)
    mask = classify(hm, margin=0.05)
    # walk along x at the center line
    j = hm.shape[1] // 2
    col = mask.classes[:, j]
    margin_cells = np.where(col == int(CellClass.MARGIN))[0]
    runs = np.split(margin_cells, np.where(np.diff(margin_cells) > 1)[0] + 1)
    assert len(runs) == 2
    for run in runs:
        assert run.size == int(np.ceil(0.05 / res))


def test_classify_ramp_unsteppable_by_normal():
    res = 0.01
    nx, ny = 200, 60
    elev = np.zeros((nx, ny))
    xs = (np.arange(nx) + 0.5) * res
    ramp = (xs > 0.5) & (xs < 1.5)
    elev[ramp, :] = (xs[ramp] - 0.5)[:, None]  # 45 degree ramp, stays above -0.05
    hm = HeightMap(np.array([0.0, -0.3, 0.0]), res, elev)
    mask = classify(hm)
    mid = mask.classes[80:140, ny // 2]
    assert (mid == int(CellClass.UNSTEPPABLE)).all()


def test_classify_unknown_cells():
    elev = np.zeros((50, 50))
    elev[10:12, 10:12] = np.nan
    hm = HeightMap(np.zeros(3), 0.01, elev)
    mask = classify(hm)
    assert (mask.classes[10:12, 10:12] == int(CellClass.UNKNOWN)).all()
    assert (mask.classes[12:18, 10:12] == int(CellClass.MARGIN)).any()


def test_classify_margin_monotone():
    hm = one_gap_map()
    small = classify(hm, margin=0.03)
    big = classify(hm, margin=0.07)
    margin_small = small.classes == int(CellClass.MARGIN)
    margin_big = big.classes == int(CellClass.MARGIN)
    assert (margin_big | ~margin_small).all()  # small set is a subset


def test_plan_foothold_nominal_steppable_snaps():
    hm = flat_map()
    mask = classify(hm)
    out = plan_foothold(mask, np.array([1.003, 0.002]), hmap=hm)
    assert np.allclose(out[:2], [1.005, 0.005], atol=1e-12)  # cell center
    assert out[2] == 0.0


def test_plan_foothold_gap_center_resolves_past_margin():
    hm = one_gap_map(gap_start=1.0, gap_len=0.10)
    mask = classify(hm, margin=0.05)
    out = plan_foothold(mask, np.array([1.05, 0.0]), hmap=hm)
    # past the far gap edge plus margin: x >= 1.10 + 0.05 or <= 1.0 - 0.05
    assert out[0] >= 1.15 - 1e-9 or out[0] <= 0.95 + 1e-9
    i, j = mask.cell_of(out)
    assert mask.classes[i, j] == int(CellClass.STEPPABLE)


def test_plan_foothold_output_always_steppable_random():
    sc = TerrainScenario("random", seed=9)
    hm = generate_terrain(sc)
    mask = classify(hm)
    rng = np.random.default_rng(1)
    hits = 0
    for _ in range(200):
        nominal = np.array([rng.uniform(0.1, 2.0), rng.uniform(-0.4, 0.4)])
        try:
            out = plan_foothold(mask, nominal, hmap=hm)
        except NoFeasibleFoothold:
            continue
        i, j = mask.cell_of(out)
        assert mask.classes[i, j] == int(CellClass.STEPPABLE)
        hits += 1
    assert hits > 100


def test_plan_foothold_deterministic():
    hm = one_gap_map()
    mask = classify(hm)
    nominal = np.array([1.05, 0.013])
    a = plan_foothold(mask, nominal, hmap=hm)
    b = plan_foothold(mask, nominal, hmap=hm)
    assert np.array_equal(a, b)


def test_plan_foothold_no_feasible():
    elev = np.full((100, 100), -0.3)
    hm = HeightMap(np.array([0.0, -0.5, 0.0]), 0.01, elev)
    mask = classify(hm)
    with pytest.raises(NoFeasibleFoothold):
        plan_foothold(mask, np.array([0.5, 0.0]), search_radius=0.15, hmap=hm)


def test_max_gap_always_resolves_within_radius():
    # acceptance geometry: 0.18 m gap, 0.05 margin, 0.15 radius
    hm = one_gap_map(gap_start=1.0, gap_len=0.18)
    mask = classify(hm, margin=0.05)
    out = plan_foothold(mask, np.array([1.09, 0.0]), search_radius=0.15, hmap=hm)
    i, j = mask.cell_of(out)
    assert mask.classes[i, j] == int(CellClass.STEPPABLE)


def test_terrain_file_roundtrip(tmp_path):
    sc = TerrainScenario("aligned", seed=5, length=1.0)
    hm = generate_terrain(sc)
    path = tmp_path / "terrain.txt"
    save_terrain(hm, path)
    back = load_terrain(path)
    assert np.array_equal(back.elevation, hm.elevation)
    assert np.array_equal(back.origin, hm.origin)
    assert back.resolution == hm.resolution


def test_terrain_file_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("terrain-v9\n")
    with pytest.raises(ValueError):
        load_terrain(path)
