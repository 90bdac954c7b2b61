"""Acceptance criteria 1-9.

Each test records a PASS/FAIL line through the ``criterion`` fixture; the lines are
repeated in the pytest terminal summary.  The three desk-scale trainings (default,
direct-ensemble and 1:1:1 weights) run through the CLI once and are cached under
``.cache/`` keyed by their resolved config, so later runs only evaluate.
"""

import json
import math
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from dipwm.cli import build_corpus, build_pool, config_to_yaml, load_run_config, main
from dipwm.fr_surrogates import EmbedderModel, embed
from dipwm.meta_trainer import (
    LossBreakdown,
    LossWeights,
    Trainer,
    assign_targets,
    bce_loss,
    compute_losses,
    inner_adapt,
    meta_test_losses,
    total_losses,
)
from dipwm.metrics_eval import (
    asr_from_cosines,
    bit_accuracy,
    black_box_asr,
    evaluate_robustness,
    evaluate_transfer,
    decode_bits,
    psnr,
    quantize,
    ssim,
    white_box_asr,
)
from dipwm.imaging_io import generate_synthetic_corpus
from dipwm.noise_pool import EvalProcessingSpec, diff_jpeg, real_jpeg
from dipwm.watermark_codec import WatermarkDecoder, WatermarkEncoder, load_codec, parameters_of, params_checksum

from conftest import SMALL, SMALL_CODEC

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
ROBUST_SPECS = [EvalProcessingSpec.parse(s) for s in ("jpeg:50", "jpeg:30", "gaussian_noise:0.003")]
TRAIN_BUDGET_S = 30 * 60


# ---------------------------------------------------------------- desk-scale runs


def _run_arm(config_name: str) -> dict:
    """Train one arm through ``dipwm train`` unless a matching cached run exists."""
    rc, cfg_path = load_run_config(CONFIGS / config_name)
    ckpt = Path(rc.paths.checkpoint_dir)
    timing_path = ckpt / "timing.json"
    wanted = config_to_yaml(rc)
    fresh = (
        (ckpt / "final" / "codec.pt").exists()
        and timing_path.exists()
        and (ckpt / "run_config.yaml").read_text() == wanted
    )
    if not fresh:
        shutil.rmtree(ckpt, ignore_errors=True)
        t0 = time.perf_counter()
        assert main(["calibrate", "--config", str(cfg_path)]) == 0
        t1 = time.perf_counter()
        assert main(["train", "--config", str(cfg_path)]) == 0
        t2 = time.perf_counter()
        timing_path.write_text(json.dumps({"surrogates_s": t1 - t0, "train_s": t2 - t1}))
    timing = json.loads(timing_path.read_text())
    encoder, decoder, _ = load_codec(ckpt / "final" / "codec.pt")
    corpus = build_corpus(rc)
    pool = build_pool(rc, corpus, train_missing=False)
    target_map = assign_targets(corpus, rc.train.seed)
    clean = evaluate_transfer(encoder, decoder, pool, corpus, target_map=target_map, seed=0)
    robust = evaluate_robustness(encoder, decoder, pool, corpus, ROBUST_SPECS, target_map=target_map, seed=0)
    return {"rc": rc, "ckpt": ckpt, "timing": timing, "clean": clean, "robust": robust,
            "encoder": encoder, "decoder": decoder, "corpus": corpus, "pool": pool}


@pytest.fixture(scope="module")
def desk():
    return _run_arm("desk.yaml")


@pytest.fixture(scope="module")
def desk_no_meta(desk):
    return _run_arm("desk_no_meta.yaml")


@pytest.fixture(scope="module")
def desk_1_1_1(desk):
    return _run_arm("desk_1_1_1.yaml")


# ---------------------------------------------------------------- helpers


def _scalar_bce(w, z):
    total = 0.0
    for wi, zi in zip(w, z):
        p = min(max(1 / (1 + math.exp(-zi)), 1e-7), 1 - 1e-7)
        total -= wi * math.log(p) + (1 - wi) * math.log(1 - p)
    return total / len(w)


def _fd_agrees(f, x, grad, rng, n=10, h=1e-6, rel=1e-2):
    flat = x.detach().clone().view(-1)
    for i in rng.choice(flat.numel(), n, replace=False):
        up, down = flat.clone(), flat.clone()
        up[i] += h
        down[i] -= h
        with torch.no_grad():
            fd = (f(up.view_as(x)) - f(down.view_as(x))) / (2 * h)
        g = float(grad.view(-1)[i])
        if abs(fd - g) > rel * max(abs(fd), abs(g)) + 1e-8:
            return False
    return True


# ---------------------------------------------------------------- 1. metric oracles


def test_criterion_1_metric_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n = 1000

    acc_ok = True
    for _ in range(n):
        size = int(rng.integers(1, 60))
        w, w_hat = rng.integers(0, 2, size), rng.integers(0, 2, size)
        ref = 1 - sum(abs(int(a) - int(b)) for a, b in zip(w, w_hat)) / size
        acc_ok &= abs(bit_accuracy(w, w_hat) - ref) <= 1e-6

    asr_ok = True
    for _ in range(n):
        c = rng.uniform(-1, 1, int(rng.integers(1, 40)))
        tau = float(rng.uniform(-1, 1))
        ref = sum(1 for v in c if v > tau) / len(c)
        asr_ok &= abs(asr_from_cosines(c, tau) - ref) <= 1e-6

    bce_ok = True
    for _ in range(n):
        size = int(rng.integers(1, 60))
        w = rng.integers(0, 2, size).astype(np.float64)
        z = rng.normal(0, 5, size)
        bce_ok &= abs(float(bce_loss(torch.from_numpy(w), torch.from_numpy(z))) - _scalar_bce(w, z)) <= 1e-6

    ssim_ok = True
    for _ in range(n):
        h, wd = rng.integers(11, 17, 2)
        x = rng.random((3, h, wd))
        y = np.clip(x + rng.normal(0, rng.uniform(0.005, 0.3), x.shape), 0, 1)
        ref = structural_similarity(x.transpose(1, 2, 0), y.transpose(1, 2, 0), data_range=1.0, channel_axis=2,
                                    gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        ssim_ok &= abs(ssim(torch.from_numpy(x)[None], torch.from_numpy(y)[None]) - ref) <= 1e-4

    elapsed = time.perf_counter() - t0
    ok = criterion(1, [
        (f"bit_accuracy {n} cases", acc_ok), (f"ASR {n} cases", asr_ok), (f"BCE {n} cases", bce_ok),
        (f"SSIM {n} cases vs skimage", ssim_ok), (f"runtime {elapsed:.1f}s < 60s", elapsed < 60),
    ])
    assert ok


# ---------------------------------------------------------------- 2. gradients


def test_criterion_2_gradients_match_finite_differences(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    torch.manual_seed(1)
    x = torch.rand(1, 3, SMALL, SMALL, dtype=torch.float64)
    w = torch.randint(0, 2, (1, SMALL_CODEC.payload_bits)).double()
    r = torch.randn(1, 3, SMALL, SMALL, dtype=torch.float64)

    enc = WatermarkEncoder(SMALL_CODEC).double().eval()
    # keep the clamp inactive so the map is smooth around the probe points
    xe = (0.25 + 0.5 * x).requires_grad_(True)
    (enc(xe, w) * r).sum().backward()
    enc_x = _fd_agrees(lambda v: float((enc(v, w) * r).sum()), xe, xe.grad, rng)
    p = enc.to_rgb.weight
    enc.zero_grad()
    (enc(xe.detach(), w) * r).sum().backward()
    base = p.detach().clone()

    def f_param(v):
        with torch.no_grad():
            p.copy_(v)
            out = float((enc(xe.detach(), w) * r).sum())
            p.copy_(base)
        return out

    enc_p = _fd_agrees(f_param, base, p.grad.detach().clone(), rng)

    dec = WatermarkDecoder(SMALL_CODEC).double().eval()
    rd = torch.randn(1, SMALL_CODEC.payload_bits, dtype=torch.float64)
    xd = x.clone().requires_grad_(True)
    (dec(xd) * rd).sum().backward()
    dec_ok = _fd_agrees(lambda v: float((dec(v) * rd).sum()), xd, xd.grad, rng)

    torch.manual_seed(2)
    emb = EmbedderModel("mini_residual", 4, embed_dim=16).double().eval()
    re_ = torch.randn(1, 16, dtype=torch.float64)
    xm = x.clone().requires_grad_(True)
    (embed(emb, xm, allow_untrained=True) * re_).sum().backward()
    emb_ok = _fd_agrees(lambda v: float((embed(emb, v, allow_untrained=True) * re_).sum()), xm, xm.grad, rng)

    xj = x.clone().requires_grad_(True)
    (diff_jpeg(xj, 50) * r).sum().backward()
    jpeg_ok = _fd_agrees(lambda v: float((diff_jpeg(v, 50) * r).sum()), xj, xj.grad, rng, n=20)

    elapsed = time.perf_counter() - t0
    ok = criterion(2, [
        ("encoder w.r.t. input", enc_x), ("encoder w.r.t. weights", enc_p), ("decoder", dec_ok),
        ("embedder", emb_ok), ("diff_jpeg", jpeg_ok), (f"runtime {elapsed:.1f}s < 300s", elapsed < 300),
    ])
    assert ok


# ---------------------------------------------------------------- 3. loss composition

_COMPOSITION_FAILURES = []
finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=500, deadline=None)
@given(finite, finite, finite, finite, finite, finite)
def _composition_property(ip, it, at, ae, wp, wt):
    parts = LossBreakdown(l_inv_phi=ip, l_inv_tes=it, l_adv_tra=at, l_adv_tes=ae, l_wm_phi=wp, l_wm_tes=wt)
    l_dip = total_losses(parts, LossWeights())
    ok = (
        parts.l_inv_total == (ip + it) / 2
        and parts.l_adv_total == at + ae
        and parts.l_wm_total == wp + wt
        and l_dip == 100.0 * (at + ae) + 0.05 * ((ip + it) / 2) + 0.05 * (wp + wt)
    )
    if not ok:
        _COMPOSITION_FAILURES.append((ip, it, at, ae, wp, wt))
    assert ok


def test_criterion_3_loss_composition(criterion):
    try:
        _composition_property()
        held = True
    except Exception:  # hypothesis re-raises the falsifying example
        held = False
    weights = LossWeights()
    ok = criterion(3, [
        ("identities exact over 500 random reals", held and not _COMPOSITION_FAILURES),
        ("default weights 100/0.05/0.05", (weights.adv, weights.inv, weights.wm) == (100.0, 0.05, 0.05)),
    ])
    assert ok


# ---------------------------------------------------------------- 4. meta-step semantics


def test_criterion_4_meta_step_semantics(criterion):
    rc, _ = load_run_config(CONFIGS / "desk.yaml")
    corpus = build_corpus(rc)
    pool = build_pool(rc, corpus, train_missing=True)

    torch.manual_seed(0)
    enc = WatermarkEncoder(rc.codec)
    dec = WatermarkDecoder(rc.codec)
    idx = corpus.indices("train")[:4]
    x = corpus.images[idx]
    w = torch.randint(0, 2, (4, rc.codec.payload_bits)).float()
    x_t = corpus.images[corpus.indices("target")[:4]]
    phi = parameters_of(enc)
    theta = inner_adapt(phi, {k: torch.zeros_like(v) for k, v in phi.items()}, rc.train.inner_lr)
    same_params = all(torch.equal(theta[k], phi[k]) for k in phi)
    tgt = {id(m): embed(m, x_t) for m in pool.white_box}
    _, _, x_tes = meta_test_losses(enc, theta, x, w, tgt, pool.meta_test)
    same_images = torch.equal(x_tes, enc(x, w))

    before = params_checksum(enc)
    compute_losses(enc, dec, x, w, x_t, pool, rc.train, rc.noise, rc.weights, np.random.default_rng(0))
    unchanged = params_checksum(enc) == before

    one_epoch = replace(rc.train, epochs=1, val_every=0)
    histories = []
    for _ in range(2):
        trainer = Trainer(corpus, pool, one_epoch, rc.noise, rc.weights, rc.codec)
        trainer.train()
        histories.append(trainer.state.history)
    ok = criterion(4, [
        ("zero inner gradient gives theta == phi", same_params),
        ("and identical meta-test images", same_images),
        ("phi checksum unchanged by the inner loop", unchanged),
        ("fixed seed gives bit-identical loss history", histories[0] == histories[1]),
    ])
    assert ok


# ---------------------------------------------------------------- 5. desk-scale end to end


def test_criterion_5_desk_scale_end_to_end(desk, criterion):
    clean = desk["clean"]
    held = [r for r in clean.rows if r["role"] == "black_box"]
    acc = clean.rows[0]["acc"]
    ssim_mean = clean.rows[0]["ssim_mean"]
    wb = white_box_asr(clean)
    bb = black_box_asr(clean)
    base = float(np.mean([r["baseline_asr"] for r in held]))
    train_s = desk["timing"]["train_s"]
    ckpts = all((desk["ckpt"] / d / "codec.pt").exists() for d in ("best", "final", "ckpt_100"))
    ok = criterion(5, [
        (f"training {train_s / 60:.1f} min <= 30 min, checkpoints present", train_s <= TRAIN_BUDGET_S and ckpts),
        (f"clean Acc {acc:.3f} >= 0.95", acc >= 0.95),
        (f"mean SSIM {ssim_mean:.3f} >= 0.85", ssim_mean >= 0.85),
        (f"white-box ASR {wb:.3f} >= 0.5", wb >= 0.5),
        (f"black-box ASR {bb:.3f} >= 3 x baseline {base:.3f} and above it", bb >= 3 * base and bb > base),
    ])
    assert ok


# ---------------------------------------------------------------- 6. robustness


def test_criterion_6_robustness(desk, criterion):
    robust = desk["robust"]
    name = desk["pool"].all_models[0].name
    a50 = robust.row(name, "jpeg:50")["acc"]
    a30 = robust.row(name, "jpeg:30")["acc"]
    an = robust.row(name, "gaussian_noise:0.003")["acc"]
    ok = criterion(6, [
        (f"Acc after real JPEG QF=50 {a50:.3f} >= 0.90", a50 >= 0.90),
        (f"Acc after Gaussian noise var 0.003 {an:.3f} >= 0.90", an >= 0.90),
        (f"Acc(QF=50) {a50:.3f} >= Acc(QF=30) {a30:.3f}", a50 >= a30),
    ])
    assert ok


# ---------------------------------------------------------------- 7. ablation direction


def test_criterion_7_ablation_direction(desk, desk_no_meta, desk_1_1_1, criterion):
    m, p, e = desk["clean"], desk_no_meta["clean"], desk_1_1_1["clean"]
    bb_m, bb_p = black_box_asr(m), black_box_asr(p)
    s_m, s_p = m.rows[0]["ssim_mean"], p.rows[0]["ssim_mean"]
    wb_d, wb_e = white_box_asr(m), white_box_asr(e)
    same_order = (
        [json.loads(x)["data_hash"] for x in (desk["ckpt"] / "train_log.jsonl").read_text().splitlines()]
        == [json.loads(x)["data_hash"] for x in (desk_no_meta["ckpt"] / "train_log.jsonl").read_text().splitlines()]
    )
    extra_s = desk_no_meta["timing"]["train_s"] + desk_1_1_1["timing"]["train_s"]
    ok = criterion(7, [
        ("both arms saw identical data order", same_order),
        (f"black-box ASR meta {bb_m:.3f} >= w/o-meta {bb_p:.3f}", bb_m >= bb_p),
        (f"mean SSIM meta {s_m:.3f} >= w/o-meta {s_p:.3f}", s_m >= s_p),
        (f"white-box ASR 1:1:1 {wb_e:.3f} < default {wb_d:.3f}", wb_e < wb_d),
        (f"ablation arms {extra_s / 60:.1f} min <= 2 desk trainings", extra_s <= 2 * TRAIN_BUDGET_S),
    ])
    assert ok


# ---------------------------------------------------------------- 8. diff_jpeg fidelity


def test_criterion_8_diff_jpeg_fidelity(criterion):
    images = generate_synthetic_corpus(16, 4, seed=8).images
    assert len(images) == 64
    with torch.no_grad():
        values = psnr(real_jpeg(images, 50), diff_jpeg(images, 50), per_image=True)
    mean = float(values.mean())
    ok = criterion(8, [(f"mean PSNR vs real codec at QF=50 over 64 images {mean:.2f} dB >= 25", mean >= 25)])
    assert ok


# ---------------------------------------------------------------- 9. verify contract


def test_criterion_9_verify_rejects_impostors(desk, criterion):
    encoder, decoder, corpus = desk["encoder"], desk["decoder"], desk["corpus"]
    bits = encoder.cfg.payload_bits
    rng = np.random.default_rng(9)
    trials = 1000
    idx = corpus.indices("test")
    carriers = corpus.images[idx[np.arange(trials) % len(idx)]]
    owner = torch.from_numpy(rng.integers(0, 2, (trials, bits)).astype(np.float32))
    with torch.no_grad():
        x_hat = torch.cat([quantize(encoder(carriers[i : i + 100], owner[i : i + 100])) for i in range(0, trials, 100)])
    decoded = decode_bits(decoder, x_hat).numpy()
    impostors = rng.integers(0, 2, (trials, bits))
    rejected = sum(bit_accuracy(impostors[k], decoded[k]) < 0.9 for k in range(trials)) / trials
    ok = criterion(9, [(f"impostor payloads rejected {rejected:.4f} >= 0.999 of {trials} trials", rejected >= 0.999)])
    assert ok
