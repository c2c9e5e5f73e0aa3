import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sigpca.data import GriddedField
from sigpca.signatures import (TIME_CHANNEL, SignatureConfig, SignatureError, augment_path,
                               compute_features, dyadic_windows, load_features, save_features,
                               signature_depth1, signature_depth2, signature_fluctuations)


def _chen_fold_depth2(path):
    """Depth-2 signature by folding single-segment signatures with Chen's product."""
    C = path.shape[0]
    s1 = np.zeros(C)
    s2 = np.zeros((C, C))
    for t in range(path.shape[1] - 1):
        d = path[:, t + 1] - path[:, t]
        s2 = s2 + np.outer(d, d) / 2 + np.outer(s1, d)
        s1 = s1 + d
    return s2


def _quadrature_depth2(path, sub=2000):
    """Riemann sum of int (x_i(u) - x_i(0)) dx_j(u) on a finely resampled polyline."""
    pts = [path[:, 0:1]]
    for t in range(path.shape[1] - 1):
        w = np.linspace(0, 1, sub + 1)[1:]
        pts.append(path[:, t:t + 1] + np.outer(path[:, t + 1] - path[:, t], w))
    fine = np.concatenate(pts, axis=1)
    mid = 0.5 * (fine[:, 1:] + fine[:, :-1]) - fine[:, :1]
    return mid @ np.diff(fine, axis=1).T


def test_augment_examples():
    x = np.array([[5.0, 7.0]])
    assert augment_path(x, True, False).tolist() == [[0, 5, 7]]
    assert augment_path(x, False, True).tolist() == [[0, 1], [5, 7]]
    assert augment_path(x, True, True).tolist() == [[0, 0.5, 1], [0, 5, 7]]


def test_dyadic_windows_25():
    ws = dyadic_windows(25, 3)
    assert [(w.start, w.end) for w in ws] == [(0, 24), (0, 12), (12, 24), (0, 6), (6, 12),
                                               (12, 18), (18, 24)]
    assert [w.level for w in ws] == [1, 2, 2, 3, 3, 3, 3]
    assert [(w.start, w.end) for w in dyadic_windows(25, 1)] == [(0, 24)]


@pytest.mark.parametrize("T,dw", [(16, 3), (17, 4), (9, 4), (2, 1), (25, 3), (100, 5)])
def test_dyadic_windows_partition(T, dw):
    ws = dyadic_windows(T, dw)
    assert len(ws) == 2 ** dw - 1
    for lvl in range(1, dw + 1):
        level = [w for w in ws if w.level == lvl]
        assert len(level) == 2 ** (lvl - 1)
        assert level[0].start == 0 and level[-1].end == T - 1
        for a, b in zip(level, level[1:]):
            assert a.end == b.start
        covered = set()
        for w in level:
            assert w.start < w.end
            covered |= set(range(w.start, w.end + 1))
        assert covered == set(range(T))


def test_dyadic_windows_too_deep():
    with pytest.raises(SignatureError):
        dyadic_windows(4, 3)


def test_depth1_examples():
    assert signature_depth1(np.array([[2.0, 5.0, 4.0]]), (0, 2))[0] == 2.0
    assert signature_depth1(np.full((1, 6), 3.3), (1, 5))[0] == 0.0
    rng = np.random.default_rng(0)
    p = rng.normal(size=(3, 50)).cumsum(axis=1)
    steps = np.zeros(3)
    for t in range(10, 40):
        steps += p[:, t + 1] - p[:, t]
    assert np.allclose(signature_depth1(p, (10, 40)), steps, atol=1e-12)
    with pytest.raises(SignatureError):
        signature_depth1(p, (4, 4))


def test_depth2_linear_segment():
    s = signature_depth2(np.array([[0.0, 2.0], [0.0, 3.0]]), (0, 1))
    assert s.tolist() == [[2.0, 3.0], [3.0, 4.5]]


def test_depth2_two_segment():
    s = signature_depth2(np.array([[0.0, 1.0, 1.0], [0.0, 0.0, 1.0]]), (0, 2))
    assert s[0, 1] == 1.0 and s[1, 0] == 0.0


def test_depth2_matches_chen_fold_and_quadrature():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(3, 7))
    ours = signature_depth2(p, (0, 6))
    assert np.allclose(ours, _chen_fold_depth2(p), atol=1e-12)
    assert np.allclose(ours, _quadrature_depth2(p), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), C=st.integers(1, 4), T=st.integers(2, 30))
def test_depth2_diagonal_and_shuffle(seed, C, T):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(C, T)) * 3
    s = signature_depth2(p, (0, T - 1))
    d = p[:, -1] - p[:, 0]
    assert np.allclose(np.diag(s), d ** 2 / 2, rtol=1e-12, atol=1e-12)
    assert np.allclose(s + s.T, np.outer(d, d), rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), T=st.integers(3, 40))
def test_chen_identity(seed, T):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(3, T)).cumsum(axis=1)
    a, b, c = sorted(rng.choice(T, 3, replace=False))
    s1ab, s1bc = signature_depth1(p, (a, b)), signature_depth1(p, (b, c))
    assert np.allclose(signature_depth1(p, (a, c)), s1ab + s1bc, rtol=1e-10, atol=1e-12)
    lhs = signature_depth2(p, (a, c))
    rhs = signature_depth2(p, (a, b)) + signature_depth2(p, (b, c)) + np.outer(s1ab, s1bc)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


def test_refinement_and_translation_invariance():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(2, 6))
    refined = np.insert(p, 3, 0.5 * (p[:, 2] + p[:, 3]), axis=1)
    assert np.allclose(signature_depth2(p, (0, 5)), signature_depth2(refined, (0, 6)), atol=1e-12)
    assert np.allclose(signature_depth1(p, (0, 5)), signature_depth1(refined, (0, 6)), atol=1e-12)
    shifted = p + np.array([[4.0], [-2.5]])
    assert np.allclose(signature_depth2(shifted, (0, 5)), signature_depth2(p, (0, 5)), atol=1e-12)
    # the basepoint pins the path start at zero, so a shift now shows up in the terms
    bp = augment_path(p, True, False)
    bps = augment_path(shifted, True, False)
    assert not np.allclose(signature_depth1(bp, (0, 6)), signature_depth1(bps, (0, 6)))


# ------------------------------------------------------------------ features

def _field(S, T, D, seed=0):
    rng = np.random.default_rng(seed)
    coords = np.column_stack([np.linspace(40, 44, D), np.linspace(-90, -86, D)])
    return GriddedField(rng.normal(size=(S, T, D)).cumsum(axis=1), coords, [str(i) for i in range(S)])


def test_feature_count_nldas_scale():
    fld = GriddedField(np.zeros((2, 24, 5120)), np.zeros((5120, 2)), ["a", "b"])
    fm = compute_features(fld, SignatureConfig(window_depth=3))
    assert fm.shape[1] == 35_840 == 5120 * 7


@pytest.mark.parametrize("D", [1, 3, 16])
@pytest.mark.parametrize("dw", [1, 2, 3, 4])
def test_feature_count_law(D, dw):
    fm = compute_features(_field(2, 24, D), SignatureConfig(window_depth=dw))
    assert fm.shape[1] == D * (2 ** dw - 1)
    assert len(set(fm.col_desc)) == fm.shape[1]


def test_feature_count_no_augmentation():
    fm = compute_features(_field(3, 8, 3), SignatureConfig(window_depth=1, basepoint=False,
                                                           time_augment=False))
    assert fm.shape == (3, 3)


def test_depth1_features_match_direct_evaluation():
    fld = _field(4, 24, 5, seed=3)
    cfg = SignatureConfig(window_depth=3)
    fm = compute_features(fld, cfg)
    ws = dyadic_windows(25, 3)
    col = 0
    for w, win in enumerate(ws):
        for d in range(5):
            assert fm.col_desc[col].window == w and fm.col_desc[col].term == (d,)
            for s in range(4):
                path = augment_path(fld.values[s, :, d][None, :], True, True)
                assert fm.values[s, col] == pytest.approx(signature_depth1(path, win)[1], abs=1e-12)
            col += 1


def test_depth2_feature_counts_and_values():
    fld = _field(3, 24, 10, seed=4)
    locs = (7, 2, 5, 0)
    cfg = SignatureConfig(depth=2, window_depth=3, depth2_locations=locs)
    fm = compute_features(fld, cfg)
    n_pairs = 0
    for w in range(7):
        for i in (TIME_CHANNEL, *locs):
            for j in (TIME_CHANNEL, *locs):
                n_pairs += 1
    assert fm.shape[1] == 10 * 7 + n_pairs == 70 + 7 * 25
    fm1 = compute_features(fld, SignatureConfig(window_depth=3))
    assert np.array_equal(fm.values[:, :70], fm1.values)
    assert fm.col_desc[:70] == fm1.col_desc
    # spot-check one pair column against a direct evaluation
    win = dyadic_windows(25, 3)[4]
    idx = next(i for i, c in enumerate(fm.col_desc) if c.window == 4 and c.term == (2, TIME_CHANNEL))
    s = 1
    chans = np.vstack([np.linspace(0, 1, 25)] + [np.concatenate([[0.0], fld.values[s, :, l]]) for l in locs])
    expect = signature_depth2(chans, win)[2, 0]
    assert fm.values[s, idx] == pytest.approx(expect, abs=1e-12)


def test_depth2_config_validation():
    with pytest.raises(SignatureError):
        SignatureConfig(depth=2)
    with pytest.raises(SignatureError):
        SignatureConfig(depth=3)
    SignatureConfig(depth=2, depth2_all=True)


def test_fluctuations():
    fld = _field(5, 8, 3, seed=5)
    fm = compute_features(fld, SignatureConfig(window_depth=2))
    fm.values[:, 0] = 4.2
    fm.values[:, 1] = [1, 3, 1, 3, 1][:5]
    ft = signature_fluctuations(fm)
    assert ft.table.shape == (3, 3)
    assert ft.table[0, 0] == 0.0
    assert ft.column_std[1] == pytest.approx(np.std([1, 3, 1, 3, 1], ddof=1))

    two = compute_features(_field(2, 8, 1), SignatureConfig(window_depth=1))
    two.values[:, 0] = [1.0, 3.0]
    assert signature_fluctuations(two).table[0, 0] == pytest.approx(np.sqrt(2))

    rng = np.random.default_rng(9)
    fm.values[:] = rng.normal(size=fm.values.shape) * 5 + 100
    ft = signature_fluctuations(fm)
    for c in range(fm.shape[1]):
        x = fm.values[:, c]
        mu = sum(x) / len(x)
        var = sum((v - mu) ** 2 for v in x) / (len(x) - 1)
        loc, w = fm.col_desc[c].term[0], fm.col_desc[c].window
        assert ft.table[loc, w] == pytest.approx(np.sqrt(var), abs=1e-12)
    with pytest.raises(SignatureError):
        signature_fluctuations(compute_features(_field(1, 8, 2), SignatureConfig(window_depth=1)))


def test_fluctuations_depth2_table():
    fld = _field(6, 16, 4, seed=6)
    fm = compute_features(fld, SignatureConfig(depth=2, window_depth=2, depth2_locations=(1, 3)))
    ft = signature_fluctuations(fm, order=2)
    assert ft.locations.tolist() == [1, 3]
    assert np.isfinite(ft.table).all() and (ft.table > 0).all()


def test_feature_matrix_round_trip(tmp_path):
    fm = compute_features(_field(3, 16, 4), SignatureConfig(depth=2, window_depth=2, depth2_locations=(1,)))
    save_features(fm, tmp_path / "fm")
    back = load_features(tmp_path / "fm")
    assert back.values.tobytes() == fm.values.tobytes()
    assert back.col_desc == fm.col_desc
    assert back.windows == fm.windows
