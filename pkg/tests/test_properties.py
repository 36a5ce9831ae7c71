"""Property-based checks of the invariants each module promises."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats as sstats

from crowdspawn.data import Trajectory, load_trajectories, make_dataset, split_endpoints, write_trajectories
from crowdspawn.metrics import ks_distance, stats_from_intervals
from crowdspawn.orchestrator import AgentRecord, check_log, simulate
from crowdspawn.policy import PolicySpec
from crowdspawn.spatial import AreaModel, build_cooccurrence, sample_spawn_goals
from crowdspawn.temporal import SpawnSequence, dedup_times, make_windows

coords = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)
SETTINGS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])


@st.composite
def trajectories(draw, max_agents=6):
    n = draw(st.integers(1, max_agents))
    out = []
    for i in range(n):
        length = draw(st.integers(2, 6))
        pts = draw(arrays(np.float64, (length, 2), elements=coords))
        out.append(Trajectory(i, draw(st.integers(0, 50)), pts))
    return out


@SETTINGS
@given(trajectories(), st.randoms(use_true_random=False))
def test_split_endpoints_permutes_with_input(trajs, rnd):
    perm = list(range(len(trajs)))
    rnd.shuffle(perm)
    S, E = split_endpoints(make_dataset(trajs))
    S2, E2 = split_endpoints(make_dataset([trajs[i] for i in perm]))
    np.testing.assert_array_equal(S2, S[perm])
    np.testing.assert_array_equal(E2, E[perm])


@SETTINGS
@given(trajectories())
def test_round_trip_bitwise(tmp_path_factory, trajs):
    p = tmp_path_factory.mktemp("rt") / "t.csv"
    write_trajectories(p, trajs)
    back = load_trajectories(p)
    by_id = {t.agent_id: t for t in back.trajectories}
    for t in trajs:
        assert by_id[t.agent_id].start_frame == t.start_frame
        np.testing.assert_array_equal(by_id[t.agent_id].positions, t.positions)


@SETTINGS
@given(st.integers(2, 30), coords, coords, coords, coords)
def test_interpolation_keeps_endpoints(tmp_path_factory, gap, x0, y0, x1, y1):
    p = tmp_path_factory.mktemp("gap") / "g.csv"
    p.write_text(f"frame,agent_id,x,y\n0,1,{x0!r},{y0!r}\n{gap},1,{x1!r},{y1!r}\n")
    (t,) = load_trajectories(p).trajectories
    assert len(t) == gap + 1
    assert tuple(t.positions[0]) == (x0, y0) and tuple(t.positions[-1]) == (x1, y1)


@SETTINGS
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(-1, 4)), min_size=1, max_size=60), st.integers(0, 2**31))
def test_mixture_weights_and_support(pairs, seed):
    spawns = [AreaModel(i, (float(i), 0.0), (0.05, 0.05), 1) for i in range(4)]
    goals = [AreaModel(i, (0.0, float(i)), (0.05, 0.05), 1) for i in range(5)]
    s_lab = [p[0] for p in pairs]
    g_lab = [p[1] for p in pairs]
    m = build_cooccurrence(spawns, goals, s_lab, g_lab)
    for s in range(4):
        row = m.cooccurrence[s]
        if row.sum() == 0:
            continue
        assert abs(m.mixtures[s].sum() - 1.0) < 1e-9
        np.testing.assert_array_equal(m.mixtures[s] > 0, row > 0)
        _, _, g = sample_spawn_goals(m, s, 50, seed)
        assert np.all(row[g] > 0)


samples = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=80)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # scipy's p-value on degenerate samples
@SETTINGS
@given(samples, samples)
def test_ks_symmetric_bounded_and_matches_scipy(a, b):
    d = ks_distance(a, b)
    assert 0.0 <= d <= 1.0
    assert d == ks_distance(b, a)
    assert abs(d - sstats.ks_2samp(a, b, method="asymp").statistic) < 1e-12


@SETTINGS
@given(st.lists(st.tuples(st.integers(0, 200), st.integers(1, 50)), min_size=1, max_size=40))
def test_occupancy_identity(agents):
    spawn = np.array([a[0] for a in agents])
    exit_ = spawn + np.array([a[1] for a in agents])
    length = int(exit_.max()) + 1
    s = stats_from_intervals(spawn, spawn, exit_, length)
    assert s.agents_per_frame.sum() == s.time_in_scene.sum()
    assert s.spawns_per_window.sum() == len(agents)
    assert len(s.agents_per_frame) == length and s.agents_per_frame.min() >= 0


@SETTINGS
@given(st.lists(st.floats(0, 500, allow_nan=False), max_size=60), st.integers(2, 100), st.data())
def test_windows_cover_every_event(times, w, data):
    o = data.draw(st.integers(0, w - 1))
    seq = SpawnSequence(0, dedup_times(times), 600.0)
    wins = make_windows(seq, w, o)
    for t in seq.times:
        if t == 0:
            continue  # windows are half-open on the left
        assert any(x.start < t <= x.end for x in wins)
    for x in wins:
        assert np.all(x.rel_times > 0) and np.all(x.rel_times <= w)
        assert x.gap >= 0


@SETTINGS
@given(st.lists(st.floats(0, 1000, allow_nan=False), max_size=80))
def test_dedup_strictly_increasing(times):
    out = dedup_times(times)
    assert len(out) == len(times)
    assert np.all(np.diff(out) > 0)


@SETTINGS
@given(arrays(np.float64, (20, 4), elements=st.floats(-1e3, 1e3)), st.floats(0.01, 5))
def test_scripted_actions_bounded(obs, v):
    a = PolicySpec("scripted", v).act(obs)
    assert np.all(np.linalg.norm(a, axis=1) <= v * (1 + 1e-12))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 80), coords, coords), min_size=0, max_size=25),
       st.floats(0.1, 2.0), st.integers(1, 40))
def test_conservation_holds_for_any_schedule(events, v, lifetime):
    events = sorted(events)
    agents = [AgentRecord(i, 0, 0, t, np.zeros(2), np.array([x, y]) / 1e3) for i, (t, x, y) in enumerate(events)]
    log = simulate(agents, PolicySpec("scripted", v), 100, max_lifetime=lifetime)
    assert check_log(log) == []
    c = log.counts
    np.testing.assert_array_equal(c[:, 1], c[:, 2] + c[:, 3] + c[:, 4])
    assert c[-1, 1] == len(agents) and c[-1, 2] == 0
