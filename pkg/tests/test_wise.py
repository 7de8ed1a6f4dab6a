import numpy as np
import pytest

from services.costmodel import flops_of_model, sweep_tradeoff
from services.errors import FormatError, IsoComputeError, WiseError
from services.moddata import Modality
from services.wise import (
    ISO_SPREAD_LIMIT,
    NEVER_EXIT_TAU,
    ExitChain,
    ExitEngine,
    ExitPoint,
    ExitPolicy,
    LateralMode,
    PolicyEvaluation,
    WiseWeights,
    check_iso_spread,
    combine_batch,
    ensemble_combine,
    evaluate_policy,
    fit_wise,
    get_policy,
    infer_early_exit,
    iso_compute_threshold_search,
    load_policy,
    parse_policy,
    policy_to_text,
    save_policy,
    wise_loss,
)

CHAIN = ExitChain.from_order()


def test_combine_renormalizes_weighted_sum():
    probs = np.array([[[0.6, 0.4]], [[0.2, 0.8]]])
    np.testing.assert_allclose(combine_batch(probs, np.array([1.0, 1.0])), [[0.4, 0.6]])
    np.testing.assert_allclose(combine_batch(probs, np.array([3.0, 1.0])), [[0.5, 0.5]])


def test_one_hot_weights_return_the_current_exit():
    dist, confidence = ensemble_combine(np.array([[0.9, 0.1], [0.3, 0.7]]), np.array([0.0, 1.0]))
    np.testing.assert_allclose(dist, [0.3, 0.7])
    assert confidence == pytest.approx(0.7)


@pytest.mark.parametrize("beta", [[0.0, 0.0], [1.0, -0.5]])
def test_degenerate_weights_are_rejected(beta):
    with pytest.raises(WiseError):
        combine_batch(np.full((2, 1, 2), 0.5), np.array(beta))


@pytest.mark.parametrize("seed", range(10))
def test_fit_matches_a_fine_weight_grid(seed):
    rng = np.random.default_rng(11 + seed)
    n, k = 30, 3
    logits = rng.standard_normal((2, n, k)) * rng.uniform(0.5, 3.0, size=(2, 1, 1))
    probs = np.exp(logits) / np.exp(logits).sum(axis=2, keepdims=True)
    labels = rng.integers(0, k, n)
    weights = fit_wise(probs, labels)
    fitted = wise_loss(probs, labels, weights.at(2))
    grid = min(wise_loss(probs, labels, np.array([w, 1.0 - w])) for w in np.linspace(0.0, 1.0, 1001))
    assert abs(fitted - grid) <= 1e-3
    assert fitted <= wise_loss(probs, labels, np.array([0.5, 0.5])) + 1e-12
    assert sum(weights.at(2)) == pytest.approx(1.0)


def test_fit_puts_all_weight_on_a_dominating_exit():
    n = 20
    probs = np.empty((2, n, 2))
    probs[0] = [0.9, 0.1]
    probs[1] = [0.5, 0.5]
    labels = np.zeros(n, dtype=int)
    beta = fit_wise(probs, labels).at(2)
    assert beta[0] >= 0.99
    assert wise_loss(probs, labels, beta) == pytest.approx(-np.log(0.9), abs=1e-3)


@pytest.mark.parametrize("scale", [0.01, 2.0, 1e6])
def test_positive_scaling_of_weights_changes_nothing(scale):
    rng = np.random.default_rng(4)
    probs = rng.dirichlet(np.ones(4), size=(3, 7))
    beta = np.array([0.2, 0.5, 0.3])
    base = combine_batch(probs, beta)
    scaled = combine_batch(probs, scale * beta)
    np.testing.assert_allclose(scaled, base, rtol=1e-12)
    np.testing.assert_array_equal(np.argmax(scaled, axis=1), np.argmax(base, axis=1))
    _, confidence = ensemble_combine(probs[:, 0, :], beta)
    _, scaled_confidence = ensemble_combine(probs[:, 0, :], scale * beta)
    assert scaled_confidence == pytest.approx(confidence, rel=1e-12)


def test_fit_rows_grow_with_position():
    probs = np.full((4, 5, 2), 0.5)
    weights = fit_wise(probs, np.zeros(5, dtype=int))
    assert [len(row) for row in weights.betas] == [1, 2, 3, 4]
    assert weights.betas[0] == (1.0,)


def test_fit_rejects_non_finite_probabilities():
    probs = np.full((2, 3, 2), 0.5)
    probs[0, 0, 0] = np.nan
    with pytest.raises(WiseError):
        fit_wise(probs, np.zeros(3, dtype=int))


def test_weights_validate_row_lengths():
    with pytest.raises(WiseError):
        WiseWeights(((1.0,), (0.5,)))
    assert WiseWeights.uniform(3).at(3).tolist() == pytest.approx([1 / 3] * 3)


def test_chain_from_order_and_parse():
    assert len(CHAIN) == 12
    assert CHAIN[0] == ExitPoint(Modality.R, 1)
    assert CHAIN[-1] == ExitPoint(Modality.IFRAME, 4)
    assert ExitChain.parse(CHAIN.text()) == CHAIN
    assert ExitPoint.parse("mv:fc") == ExitPoint(Modality.MV, 4)
    with pytest.raises(WiseError):
        ExitChain.parse("r:1 r:1")
    with pytest.raises(WiseError):
        ExitPoint.parse("r:7")


def test_policy_factory():
    assert get_policy(LateralMode.UNIFORM, CHAIN, 0.5).position_weights(3).tolist() == [1.0, 1.0, 1.0]
    assert get_policy(LateralMode.NONE, CHAIN, 0.5).position_weights(3).tolist() == [0.0, 0.0, 1.0]
    with pytest.raises(ValueError):
        get_policy(LateralMode.WISE, CHAIN, 0.5)
    with pytest.raises(WiseError):
        ExitPolicy(CHAIN, LateralMode.NONE, -0.1)


@pytest.fixture(scope="module")
def engine(tiny_cascade, tiny_split):
    _, test = tiny_split
    return ExitEngine(tiny_cascade, test)


@pytest.fixture(scope="module")
def wise_policy(engine):
    return get_policy(LateralMode.WISE, CHAIN, 0.8, engine=engine)


@pytest.mark.parametrize("mode", list(LateralMode))
def test_tau_zero_exits_everyone_at_the_first_position(engine, wise_policy, mode):
    policy = wise_policy.with_mode(mode).with_tau(0.0)
    result = engine.evaluate(policy)
    assert result.exit_histogram[0] == result.num_samples
    assert result.mean_flops == engine.ledger.chain_costs(CHAIN.keys())[0]


@pytest.mark.parametrize("mode", list(LateralMode))
def test_never_exit_costs_the_full_model_and_matches_the_full_ensemble(engine, wise_policy, mode):
    policy = wise_policy.with_mode(mode).with_tau(NEVER_EXIT_TAU)
    result = engine.evaluate(policy)
    assert result.exit_histogram[-1] == result.num_samples
    assert result.mean_flops == engine.ledger.total()
    full = combine_batch(engine.stacked(CHAIN), policy.position_weights(len(CHAIN)))
    assert result.accuracy == float(np.mean(np.argmax(full, axis=1) == engine.dataset.labels))


@pytest.mark.parametrize("mode", list(LateralMode))
def test_mean_flops_never_decrease_with_tau(engine, wise_policy, mode):
    taus = [float(t) for t in np.linspace(0.0, NEVER_EXIT_TAU, 50)]
    points = sweep_tradeoff(engine, wise_policy.with_mode(mode), taus)
    flops = [p.mean_flops for p in points]
    assert flops == sorted(flops)


def test_per_sample_walk_matches_batch_evaluation(tiny_cascade, engine, wise_policy):
    policy = wise_policy.with_tau(0.7)
    ledger = flops_of_model(tiny_cascade)
    batch = engine.evaluate(policy)
    positions, correct, flops = [], 0, 0.0
    for sample in engine.dataset:
        prediction, trace = infer_early_exit(tiny_cascade, policy, sample, ledger)
        positions.append(trace.position)
        correct += prediction == sample.label
        flops += trace.flops
    assert np.bincount(np.array(positions) - 1, minlength=len(CHAIN)).tolist() == batch.exit_histogram
    assert correct / len(engine.dataset) == pytest.approx(batch.accuracy)
    assert flops / len(engine.dataset) == pytest.approx(batch.mean_flops)


def test_early_exit_evaluates_only_what_it_needs(tiny_cascade, engine, wise_policy):
    sample = engine.dataset[0]
    _, first = infer_early_exit(tiny_cascade, wise_policy.with_tau(0.0), sample)
    assert (first.position, first.head_evaluations, first.block_evaluations) == (1, 1, 1)
    _, last = infer_early_exit(tiny_cascade, wise_policy.with_tau(NEVER_EXIT_TAU), sample)
    assert (last.position, last.head_evaluations, last.block_evaluations) == (12, 12, 12)
    assert last.flops == flops_of_model(tiny_cascade).total()


def test_hand_built_two_exit_walk(tiny_cascade, tiny_split):
    _, test = tiny_split
    samples = test.subset([0, 1])
    engine = ExitEngine(tiny_cascade, samples)
    chain = ExitChain.parse("r:1 iframe:fc")
    engine._lazy.probs[chain[0]] = np.array([[0.9, 0.05, 0.05], [0.4, 0.3, 0.3]])
    engine._lazy.probs[chain[1]] = np.array([[0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])
    costs = engine.ledger.chain_costs(chain.keys())

    result = engine.evaluate(ExitPolicy(chain, LateralMode.NONE, 0.5))
    assert result.exit_histogram == [1, 1]
    assert result.mean_flops == pytest.approx((costs[0] + costs[1]) / 2)
    expected = np.mean(np.array([0, 2]) == samples.labels)
    assert result.accuracy == pytest.approx(expected)

    # uniform: second sample averages to (0.25, 0.2, 0.55)
    uniform = engine.evaluate(ExitPolicy(chain, LateralMode.UNIFORM, 0.5))
    assert uniform.exit_histogram == [1, 1]
    assert uniform.accuracy == pytest.approx(expected)


def test_iso_search_hits_a_reachable_target(engine, wise_policy):
    low = engine.evaluate(wise_policy.with_tau(0.0)).mean_flops
    high = engine.evaluate(wise_policy.with_tau(NEVER_EXIT_TAU)).mean_flops
    target = 0.5 * (low + high)
    result = iso_compute_threshold_search(engine, wise_policy, target, tolerance=0.5)
    assert abs(result.mean_flops - target) <= 0.5 * target
    assert 0.0 <= result.tau <= NEVER_EXIT_TAU
    assert result.evaluation.mean_flops == result.mean_flops


def test_iso_search_target_at_the_top_returns_never_exit(engine, wise_policy):
    high = engine.evaluate(wise_policy.with_tau(NEVER_EXIT_TAU)).mean_flops
    result = iso_compute_threshold_search(engine, wise_policy, high)
    assert result.tau == NEVER_EXIT_TAU and result.mean_flops == high


def test_iso_search_unreachable_target(engine, wise_policy):
    with pytest.raises(IsoComputeError):
        iso_compute_threshold_search(engine, wise_policy, 10 * engine.ledger.total())


def test_policy_file_round_trip(tmp_path, wise_policy):
    path = tmp_path / "policy.wise"
    save_policy(path, wise_policy)
    assert load_policy(path) == wise_policy


def test_policy_text_errors_carry_line_numbers(wise_policy):
    text = policy_to_text(wise_policy).replace("tau ", "tau x", 1)
    with pytest.raises(FormatError, match="line 3"):
        parse_policy(text, "p.wise")
    with pytest.raises(FormatError, match="needs mode"):
        parse_policy("# empty\n")
    with pytest.raises(FormatError, match="unknown directive"):
        parse_policy("mode none\nspeed 3\n")


def test_evaluate_policy_matches_the_engine(tiny_cascade, tiny_split, engine, wise_policy):
    _, test = tiny_split
    policy = wise_policy.with_tau(0.6)
    direct = evaluate_policy(tiny_cascade, policy, test)
    via_engine = engine.evaluate(policy)
    assert direct.accuracy == via_engine.accuracy
    assert direct.mean_flops == via_engine.mean_flops
    assert list(direct.exit_histogram) == list(via_engine.exit_histogram)


class _SteppedEngine:
    """Mean FLOPs jump from 30 to 55 at tau=0.5, so nothing lands near 40."""

    def __init__(self):
        self.ledger = None

    def evaluate(self, policy):
        flops = 30.0 if policy.tau <= 0.5 else 55.0
        return PolicyEvaluation(accuracy=0.5, mean_flops=flops, exit_histogram=[1, 0], num_samples=1)


def test_iso_search_raises_when_the_cost_curve_steps_over_the_target():
    policy = ExitPolicy(CHAIN, LateralMode.NONE, 0.5)
    with pytest.raises(IsoComputeError) as excinfo:
        iso_compute_threshold_search(_SteppedEngine(), policy, 40.0, tolerance=0.02)
    message = str(excinfo.value)
    assert "[30, 55]" in message
    assert "target 40" in message


def test_iso_search_accepts_the_step_when_it_falls_inside_tolerance():
    policy = ExitPolicy(CHAIN, LateralMode.NONE, 0.5)
    result = iso_compute_threshold_search(_SteppedEngine(), policy, 54.0, tolerance=0.02)
    assert result.mean_flops == 55.0
    assert result.tau > 0.5


def test_spread_check_between_policies():
    assert check_iso_spread({"none": 100.0, "uniform": 100.0, "wise": 100.0}) == 0.0
    assert check_iso_spread({"none": 100.0, "wise": 104.0}) == pytest.approx(0.04)
    with pytest.raises(IsoComputeError, match="none=100"):
        check_iso_spread({"none": 100.0, "uniform": 101.0, "wise": 100.0 * (1 + ISO_SPREAD_LIMIT) + 1})
