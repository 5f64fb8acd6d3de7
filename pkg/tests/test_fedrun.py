import numpy as np
import pytest

from fedcausal.data import summarize
from fedcausal.errors import (
    InvalidConfig,
    MissingReport,
    NonFiniteParameters,
    RoundMismatch,
    ValidationError,
    WorkerFailure,
)
from fedcausal.fedrun import (
    GradientReport,
    ParamBroadcast,
    SourceWorker,
    TrainConfig,
    aggregate_gradients,
    noise_seed_for,
    step,
    train,
)
from fedcausal.fedrun import messages, server
from fedcausal.fedrun.transport import InprocTransport, TcpTransport
from fedcausal.model import PriorConfig
from fedcausal.variational import GlobalParams, Objective, ParamLayout, VariationalConfig, draw_noise_set

from conftest import jittered_theta, random_sources


def report(sid, grad, round_=0):
    return GradientReport(sid, round_, np.asarray(grad, dtype=float), 0.0)


def test_aggregate_single_report_is_identity():
    assert aggregate_gradients([report(0, [1.0, 2.0])]).tolist() == [1.0, 2.0]


def test_aggregate_cancellation():
    assert np.all(aggregate_gradients([report(0, [1.5, -2.0]), report(1, [-1.5, 2.0])]) == 0.0)


def test_aggregate_order_independent():
    rng = np.random.default_rng(0)
    reps = [report(i, rng.normal(size=5) * 10.0 ** rng.integers(-8, 8)) for i in range(6)]
    ref = aggregate_gradients(reps)
    for perm in range(5):
        shuffled = [reps[i] for i in np.random.default_rng(perm).permutation(6)]
        assert np.array_equal(aggregate_gradients(shuffled), ref)


def test_aggregate_errors():
    with pytest.raises(MissingReport):
        aggregate_gradients([])
    with pytest.raises(MissingReport):
        aggregate_gradients([report(0, [1.0])], expected_sources=[0, 1])
    with pytest.raises(RoundMismatch):
        aggregate_gradients([report(0, [1.0], 0), report(1, [1.0], 1)])
    with pytest.raises(ValidationError):
        aggregate_gradients([report(0, [1.0]), report(0, [1.0])])


def test_sgd_step_examples():
    cfg = TrainConfig(learning_rate=0.1, optimizer="sgd")
    assert step(np.array([2.0]), np.array([0.0]), cfg).tolist() == [2.0]
    assert step(np.array([2.0]), np.array([1.0]), cfg)[0] == pytest.approx(2.1)


def test_adam_first_step_matches_hand_update():
    cfg = TrainConfig(learning_rate=0.01, optimizer="adam")
    theta = np.array([1.0, -1.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    # bias-corrected moments after one step are g and g**2
    expected = theta + 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(step(theta, g, cfg), expected, rtol=0, atol=1e-15)


def test_adam_keeps_state_across_steps():
    opt = server.Adam(0.1)
    theta = np.zeros(1)
    m = v = 0.0
    for t, g in enumerate([1.0, -0.5, 2.0], start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = theta + 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        theta = opt.step(theta, np.array([g]))
        assert theta[0] == pytest.approx(ref[0], rel=1e-14)


def test_step_rejects_nonfinite_gradient():
    with pytest.raises(NonFiniteParameters):
        step(np.zeros(2), np.array([np.nan, 0.0]), TrainConfig())


def test_train_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(InvalidConfig):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(InvalidConfig):
        TrainConfig(transport="udp")


def test_noise_seed_depends_on_round():
    assert noise_seed_for(0, 1) != noise_seed_for(0, 2)
    assert noise_seed_for(3, 1) == noise_seed_for(3, 1)


def test_messages_round_trip_exactly():
    theta = np.random.default_rng(0).normal(size=7) * 1e-3
    msg = messages.decode(messages.encode(ParamBroadcast(4, theta, 123)))
    assert np.array_equal(msg.theta, theta) and msg.round == 4 and msg.noise_seed == 123
    rep = messages.decode(messages.encode(GradientReport(2, 4, theta, -1.25)))
    assert np.array_equal(rep.grad, theta) and rep.elbo_value == -1.25


def test_messages_reject_extra_fields():
    with pytest.raises(ValidationError):
        messages.decode('{"type":"grad","round":0,"source_id":0,"grad":[],"elbo":0,"y":[1]}')
    with pytest.raises(ValidationError):
        messages.decode('{"type":"rows"}')


def test_wire_schema_carries_no_unit_level_fields():
    unit_level = {"w", "y", "y_obs", "x", "X", "rows", "records", "keys"}
    for fields in messages.WIRE_FIELDS.values():
        assert not unit_level & set(fields)


def _setup(m, n, d_x, seed=0):
    sources = random_sources(seed, m, n, d_x)
    return sources, [summarize(s) for s in sources], PriorConfig()


@pytest.mark.parametrize("m", [2, 3, 5])
def test_federated_gradient_equals_centralized(m):
    sources, summaries, priors = _setup(m, 12, 3)
    vcfg = VariationalConfig()
    layout = ParamLayout(3)
    workers = [SourceWorker(s, summaries, priors, layout, vcfg) for s in sources]
    obj = Objective(summaries, priors, layout, vcfg)
    for r in range(3):
        theta = jittered_theta(3, 10 * m + r, scale=0.2).vector
        seed = noise_seed_for(0, r)
        agg = aggregate_gradients([w.handle(ParamBroadcast(r, theta, seed)) for w in workers])
        _, central = obj.pooled_value_and_grad(theta, sources, draw_noise_set(seed, vcfg.mc_samples, m, vcfg))
        assert np.linalg.norm(agg - central) <= 1e-10 * np.linalg.norm(central)


def test_single_source_federation_matches_plain_ascent():
    sources, summaries, priors = _setup(1, 10, 2)
    cfg = TrainConfig(learning_rate=1e-3, rounds=5, seed=4)
    theta, trace = train(sources, summaries, priors, cfg)
    obj = Objective(summaries, priors, ParamLayout(2), cfg.vcfg)
    ref = GlobalParams.initial(2, cfg.vcfg).vector
    for r in range(5):
        value, g = obj.value_and_grad(ref, sources[0], draw_noise_set(noise_seed_for(4, r), 16, 1, cfg.vcfg))
        assert value == trace.elbo[r]
        ref = ref + 1e-3 * g
    assert np.array_equal(theta.vector, ref)


def test_fixed_noise_ascent_is_monotone():
    sources, summaries, priors = _setup(2, 6, 2)
    cfg = TrainConfig(learning_rate=1e-3, rounds=50, fixed_noise=True, mc_samples=4)
    _, trace = train(sources, summaries, priors, cfg)
    assert np.all(np.diff(trace.elbo) > 0)


def test_tcp_transport_matches_inproc():
    sources, summaries, priors = _setup(3, 8, 2)
    base = dict(learning_rate=0.01, rounds=4, optimizer="adam", seed=2, mc_samples=4)
    t_in, tr_in = train(sources, summaries, priors, TrainConfig(**base))
    t_tcp, tr_tcp = train(sources, summaries, priors, TrainConfig(transport="tcp", **base))
    assert np.array_equal(t_in.vector, t_tcp.vector)
    assert tr_in.elbo == tr_tcp.elbo and tr_in.grad_norm == tr_tcp.grad_norm


def test_training_is_deterministic():
    sources, summaries, priors = _setup(2, 8, 2)
    cfg = TrainConfig(learning_rate=0.01, rounds=5, optimizer="adam", seed=9, mc_samples=4)
    a, ta = train(sources, summaries, priors, cfg)
    b, tb = train(sources, summaries, priors, cfg)
    assert np.array_equal(a.vector, b.vector) and ta.elbo == tb.elbo


class _Broken:
    source_id = 1

    def handle(self, msg):
        raise RuntimeError("disk on fire")


class _Echo:
    source_id = 0

    def handle(self, msg):
        return GradientReport(0, msg.round, np.zeros(2), 0.0)


@pytest.mark.parametrize("kind", [InprocTransport, TcpTransport])
def test_worker_failure_is_reported(kind):
    transport = kind([_Echo(), _Broken()])
    try:
        replies = transport.exchange(ParamBroadcast(0, np.zeros(2), 1))
    finally:
        transport.close()
    with pytest.raises(WorkerFailure, match="disk on fire"):
        server._collect(replies, 0, [0, 1])


def test_train_aborts_on_worker_failure(monkeypatch):
    sources, summaries, priors = _setup(2, 6, 2)
    original = SourceWorker.handle

    def flaky(self, msg):
        if self.source_id == 1 and msg.round == 2:
            raise RuntimeError("lost connection to the ward database")
        return original(self, msg)

    monkeypatch.setattr(SourceWorker, "handle", flaky)
    with pytest.raises(WorkerFailure, match="round 2"):
        train(sources, summaries, priors, TrainConfig(rounds=5, mc_samples=2))


def test_train_rejects_bad_inputs():
    sources, summaries, priors = _setup(2, 6, 2)
    with pytest.raises(ValidationError):
        train([], summaries, priors, TrainConfig(rounds=1))
    with pytest.raises(ValidationError):
        train(sources[:1], summaries, priors, TrainConfig(rounds=1))
    with pytest.raises(ValidationError):
        train([sources[0], sources[1].take([])], summaries, priors, TrainConfig(rounds=1))


def test_trace_csv(tmp_path):
    sources, summaries, priors = _setup(1, 6, 2)
    _, trace = train(sources, summaries, priors, TrainConfig(rounds=3, mc_samples=2))
    lines = trace.to_csv(tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "round,elbo,grad_norm,wall_s" and len(lines) == 4
