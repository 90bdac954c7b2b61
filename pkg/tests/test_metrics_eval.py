import math

import numpy as np
import pytest
import torch
from scipy import stats
from skimage.metrics import structural_similarity

from dipwm.fr_surrogates import cosine, embed
from dipwm.metrics_eval import (
    AttackSpec,
    CalibrationError,
    EvalReport,
    ablation_without_meta,
    asr_from_cosines,
    attack_success_rate,
    bit_accuracy,
    black_box_asr,
    evaluate_pgd_baseline,
    evaluate_robustness,
    evaluate_transfer,
    pgd_attack,
    psnr,
    quantize,
    sign_gradient_attack,
    ssim,
    white_box_asr,
)
from dipwm.meta_trainer import TrainConfig
from dipwm.noise_pool import DEFAULT_EVAL_SPECS, EvalProcessingSpec
from dipwm.watermark_codec import WatermarkDecoder, WatermarkEncoder

from conftest import SMALL_CODEC


def _sk_ssim(x, y):
    return structural_similarity(
        x.permute(1, 2, 0).numpy(), y.permute(1, 2, 0).numpy(), data_range=1.0, channel_axis=2,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    )


def test_ssim_matches_reference_implementation():
    rng = np.random.default_rng(0)
    for _ in range(10):
        h, w = rng.integers(11, 30, 2)
        x = torch.from_numpy(rng.random((3, h, w)))
        y = (x + torch.from_numpy(rng.normal(0, rng.uniform(0.01, 0.3), (3, h, w)))).clamp(0, 1)
        assert ssim(x[None], y[None]) == pytest.approx(_sk_ssim(x, y), abs=1e-4)


def test_ssim_identity_range_and_constant_closed_form():
    x = quantize(torch.rand(2, 3, 16, 16))
    assert ssim(x, x) == 1.0
    y = quantize((x + 1 / 255).clamp(0, 1))
    assert -1 <= ssim(x, 1 - x) < ssim(x, y) < 1
    a = torch.full((1, 1, 11, 11), 0.2, dtype=torch.float64)
    b = torch.full((1, 1, 11, 11), 0.6, dtype=torch.float64)
    c1 = 0.01**2
    assert ssim(a, b) == pytest.approx((2 * 0.2 * 0.6 + c1) / (0.2**2 + 0.6**2 + c1), abs=1e-9)


def test_psnr_closed_form():
    x = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_bit_accuracy_examples_and_complement_symmetry():
    assert bit_accuracy([1, 0, 1, 1], [1, 0, 1, 1]) == 1.0
    assert bit_accuracy([1, 0, 1, 1], [0, 1, 0, 0]) == 0.0
    assert bit_accuracy([1, 0, 1, 1], [1, 1, 1, 1]) == 0.75
    rng = np.random.default_rng(1)
    for _ in range(100):
        w, w_hat = rng.integers(0, 2, (2, 50)), rng.integers(0, 2, (2, 50))
        assert bit_accuracy(w, w_hat) == bit_accuracy(1 - w, 1 - w_hat)
    with pytest.raises(ValueError):
        bit_accuracy([1, 0], [1, 0, 1])


def test_asr_counts_strict_exceedances_and_is_monotone():
    assert asr_from_cosines([0.2, 0.3, 0.5], 0.3) == pytest.approx(1 / 3)
    c = np.random.default_rng(2).uniform(-1, 1, 500)
    rates = [asr_from_cosines(c, t) for t in np.linspace(-1, 1, 41)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_attack_success_rate_uses_model_threshold(small_pool):
    m = small_pool.held_out[0]
    x_t, x_hat = torch.rand(6, 3, 16, 16), torch.rand(6, 3, 16, 16)
    cos = cosine(embed(m, x_t), embed(m, x_hat)).numpy()
    assert attack_success_rate(m, x_hat, x_t) == pytest.approx(np.mean(cos > m.tau))
    assert attack_success_rate(m, x_t, x_t, tau=0.99) == 1.0
    with pytest.raises(ValueError):
        attack_success_rate(m, x_hat[:2], x_t)
    tau, m.tau = m.tau, None
    try:
        with pytest.raises(CalibrationError):
            attack_success_rate(m, x_hat, x_t)
    finally:
        m.tau = tau


def test_verify_rule_rejects_random_impostors():
    """P(Acc >= 0.9 | 50 fair coin bits) from the binomial tail is far below 1e-3."""
    tail = stats.binom.sf(44, 50, 0.5)
    assert tail < 1e-3
    rng = np.random.default_rng(3)
    w = rng.integers(0, 2, 50)
    accepted = sum(bit_accuracy(w, rng.integers(0, 2, 50)) >= 0.9 for _ in range(2000))
    assert accepted / 2000 <= 1e-3


# ---------------------------------------------------------------- attacks


def test_zero_iterations_is_a_no_op(small_pool):
    x, x_t = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    assert torch.equal(sign_gradient_attack(x, x_t, small_pool.white_box, 0.03, 0), x)
    out, info = pgd_attack(x, x_t, small_pool.white_box, AttackSpec(iterations=0))
    assert torch.equal(out, x) and info["ssim"] == 1.0


def test_pgd_raises_cosine_and_respects_budget(small_pool):
    torch.manual_seed(0)
    x, x_t = torch.rand(3, 3, 16, 16), torch.rand(3, 3, 16, 16)
    trace = []
    eps = 0.03
    out = sign_gradient_attack(x, x_t, small_pool.white_box, eps, 8, trace=trace)
    assert trace[-1] > trace[0]
    assert float((out - x).abs().max()) <= eps + 1e-6
    assert float(out.min()) >= 0 and float(out.max()) <= 1
    fgsm = AttackSpec(method="fgsm")
    assert fgsm.iterations == 1
    with pytest.raises(ValueError):
        AttackSpec(method="cw")


def test_pgd_epsilon_tuning_hits_ssim_window(small_pool):
    torch.manual_seed(1)
    x, x_t = torch.rand(4, 3, 16, 16), torch.rand(4, 3, 16, 16)
    spec = AttackSpec(epsilon=0.001, iterations=5, ssim_target=0.9, ssim_tol=0.03, max_rounds=20)
    out, info = pgd_attack(x, x_t, small_pool.white_box, spec)
    assert info["budget_met"]
    assert abs(ssim(x, out) - 0.9) <= 0.03


# ---------------------------------------------------------------- reports


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return WatermarkEncoder(SMALL_CODEC).eval(), WatermarkDecoder(SMALL_CODEC).eval()


def test_transfer_report_grid_and_roles(codec, small_pool, small_corpus):
    rep = evaluate_transfer(*codec, small_pool, small_corpus, seed=1)
    assert len(rep.rows) == len(small_pool.all_models)
    roles = [r["role"] for r in rep.rows]
    assert roles.count("black_box") == 1
    for r in rep.rows:
        for key in ("asr", "baseline_asr", "acc"):
            assert 0 <= r[key] <= 1
    assert rep.to_jsonl() == evaluate_transfer(*codec, small_pool, small_corpus, seed=1).to_jsonl()
    assert 0 <= black_box_asr(rep) <= 1 and 0 <= white_box_asr(rep) <= 1


def test_robustness_grid_and_identity_consistency(codec, small_pool, small_corpus, tmp_path):
    specs = [EvalProcessingSpec("identity"), *DEFAULT_EVAL_SPECS, EvalProcessingSpec.parse("jpeg:50")]
    rep = evaluate_robustness(*codec, small_pool, small_corpus, specs, seed=1)
    assert len(rep.rows) == len(small_pool.all_models) * len(specs)
    clean = evaluate_transfer(*codec, small_pool, small_corpus, seed=1)
    for m in small_pool.all_models:
        a, b = rep.row(m.name, "identity"), clean.row(m.name)
        assert (a["asr"], a["acc"]) == (b["asr"], b["acc"])
    jl, cs = rep.write(tmp_path, "robust")
    lines = cs.read_text().splitlines()
    assert lines[0].split(",") == list(EvalReport.COLUMNS) and len(lines) == 1 + len(rep.rows)
    assert len(jl.read_text().splitlines()) == len(rep.rows)


def test_pgd_baseline_report(small_pool, small_corpus):
    rep = evaluate_pgd_baseline(small_pool, small_corpus, AttackSpec(iterations=2, tune_epsilon=False), seed=0)
    assert len(rep.rows) == len(small_pool.all_models)
    assert all(r["condition"] == "pgd" for r in rep.rows)


def test_ablation_arms_share_data_and_reject_mismatch(small_pool, small_corpus):
    cfg = TrainConfig(epochs=1, batch_size=8, outer_lr=1e-3, seed=2, val_every=0)
    meta, plain, t_meta, t_plain = ablation_without_meta(small_corpus, small_pool, cfg, codec_cfg=SMALL_CODEC)
    assert [r["data_hash"] for r in t_meta.state.history] == [r["data_hash"] for r in t_plain.state.history]
    assert len(meta.rows) == len(plain.rows) == len(small_pool.all_models)
    assert not math.isnan(black_box_asr(meta))
    with pytest.raises(ValueError):
        ablation_without_meta(small_corpus, small_pool, cfg, codec_cfg=SMALL_CODEC, meta_trainer=t_plain)
