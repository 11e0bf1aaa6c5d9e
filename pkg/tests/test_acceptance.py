"""End-to-end acceptance gate.

Each test prints one PASS line when its criterion holds; run with

    pytest tests/test_acceptance.py -v -s

Criterion 9 trains the desk-scale overfit profile for 2000 steps and is the
long pole (tens of minutes on a small CPU).
"""

import math
import time

import numpy as np
import pytest
import torch

from raydose.config import VARIANTS, desk_profile
from raydose.diffusion import analytic_denoise, forward_sample, reverse_step
from raydose.evaluate import constant_dose_prediction, evaluate_cohort
from raydose.inference import predict_volume
from raydose.loss import weighted_noise_loss
from raydose.metrics import ci, dose_at_volume, dose_score, dvh, hi, volume_at_dose
from raydose.phantom import PhantomParams, generate_phantom
from raydose.schedule import make_cosine_schedule, subsample_schedule
from raydose.training import Trainer

from conftest import tiny_phantom_params
from test_attention import brute_force_attention
from test_metrics import (
    oracle_dose_at_volume,
    oracle_dose_score,
    oracle_volume_at_dose,
)
from test_training import tiny_config


def report(criterion: int, message: str):
    print(f"\nACCEPTANCE {criterion:02d} PASS: {message}")


# --- criterion 1: schedule invariants ---------------------------------------


def test_criterion_01_schedule_invariants():
    start = time.time()
    for T in (10, 100, 1000):
        sched = make_cosine_schedule(T)
        assert np.all(np.diff(sched.gamma) < 0)
        np.testing.assert_allclose(sched.gamma, np.cumprod(sched.alpha), rtol=1e-10)
        for n in {1, T // 3 or 1, T}:
            sub = subsample_schedule(sched, n)
            assert np.all(np.diff(sub.gamma) < 0)
            np.testing.assert_allclose(sub.gamma, np.cumprod(sub.alpha), rtol=1e-10)
            assert np.prod(sub.alpha) == pytest.approx(sub.gamma[-1], rel=1e-10)
    elapsed = time.time() - start
    assert elapsed < 1.0
    report(1, f"schedule invariants for T in {{10,100,1000}} ({elapsed:.2f}s)")


# --- criterion 2: forward/inverse exactness ----------------------------------


def test_criterion_02_forward_inverse_round_trip():
    start = time.time()
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        y0 = r.uniform(-1, 1, (24, 24))
        eps = r.standard_normal((24, 24))
        gamma = float(r.uniform(0.02, 1.0))
        back = analytic_denoise(forward_sample(y0, gamma, eps), eps, gamma)
        worst = max(worst, float(np.abs(back - y0).max()))
    elapsed = time.time() - start
    assert worst < 1e-6
    assert elapsed < 5.0
    report(2, f"100-seed round trip, max abs error {worst:.2e} ({elapsed:.2f}s)")


# --- criterion 3: marginal consistency ---------------------------------------


def test_criterion_03_marginal_consistency():
    sched = make_cosine_schedule(100)
    mean_coef, var = 1.0, 0.0
    for t in range(1, sched.T + 1):
        a = sched.alpha_at(t)
        mean_coef *= math.sqrt(a)
        var = a * var + (1.0 - a)
        assert mean_coef == pytest.approx(math.sqrt(sched.gamma_at(t)), rel=1e-10)
        assert var == pytest.approx(1.0 - sched.gamma_at(t), rel=1e-10, abs=1e-13)

    n = 100_000
    y0 = 0.7
    chain = make_cosine_schedule(10)
    r = np.random.default_rng(2024)
    y = np.full(n, y0)
    for t in range(1, chain.T + 1):
        a = chain.alpha_at(t)
        y = math.sqrt(a) * y + math.sqrt(1 - a) * r.standard_normal(n)
    g = chain.gamma_at(chain.T)
    se_mean = math.sqrt((1 - g) / n)
    se_var = (1 - g) * math.sqrt(2.0 / (n - 1))
    mean_err = abs(y.mean() - math.sqrt(g) * y0)
    var_err = abs(y.var() - (1 - g))
    assert mean_err < 3 * se_mean
    assert var_err < 3 * se_var
    report(
        3,
        f"coefficients exact; MC over {n} draws: |dmean|={mean_err:.2e} "
        f"(3SE={3 * se_mean:.2e}), |dvar|={var_err:.2e} (3SE={3 * se_var:.2e})",
    )


# --- criterion 4: oracle-noise inversion -------------------------------------


def test_criterion_04_oracle_noise_inversion():
    sched = make_cosine_schedule(1)
    g, a = sched.gamma_at(1), sched.alpha_at(1)
    r = np.random.default_rng(11)
    y0 = r.uniform(-1, 1, (32, 32))
    eps = r.standard_normal((32, 32))
    yt = forward_sample(y0, g, eps)
    out = reverse_step(yt, eps, a, g, z=None, noise_denominator="sqrt")
    err = float(np.abs(out - y0).max())
    assert err < 1e-5
    report(4, f"one-step reverse with true noise recovers y0, max err {err:.2e}")


# --- criterion 5: attention correctness --------------------------------------


def test_criterion_05_attention_correctness():
    from raydose.attention import InterSliceBlock, SliceAttentionHead

    torch.manual_seed(0)
    head = SliceAttentionHead(4, pool=2)
    x = torch.randn(6, 4, 8, 8)
    out, attn = head(x)
    row_err = float((attn.sum(dim=1) - 1.0).abs().max().detach())
    assert row_err < 1e-6 and (attn >= 0).all()

    ref_out, ref_attn = brute_force_attention(
        x.numpy(),
        head.q_proj.weight.detach().numpy()[:, :, 0, 0],
        head.k_proj.weight.detach().numpy()[:, :, 0, 0],
        head.v_proj.weight.detach().numpy()[:, :, 0, 0],
        pool=2,
    )
    attn_err = float(np.abs(attn.detach().numpy() - ref_attn).max())
    out_err = float(np.abs(out.detach().numpy() - ref_out).max())
    assert attn_err < 1e-5 and out_err < 1e-5

    _, single = SliceAttentionHead(4, pool=2)(torch.randn(1, 4, 8, 8))
    assert torch.allclose(single, torch.ones(1, 1))

    block = InterSliceBlock(4, heads=2, pool=2, position_embedding=False)
    perm = torch.randperm(6)
    with torch.no_grad():
        perm_err = float((block(x)[perm] - block(x[perm])).abs().max())
    assert perm_err < 1e-5
    report(
        5,
        f"rows sum to 1 (err {row_err:.1e}); oracle match (attn {attn_err:.1e}, "
        f"out {out_err:.1e}); B=1 -> [[1.0]]; permutation equivariance "
        f"(err {perm_err:.1e})",
    )


# --- criterion 6: gradient checks ---------------------------------------------


def test_criterion_06_gradient_checks():
    from raydose.attention import InterSliceBlock
    from raydose.predictor import NoisePredictor

    start = time.time()
    torch.manual_seed(1)

    # inter-slice block: every parameter scalar vs central differences
    block = InterSliceBlock(4, heads=4, pool=2).double()
    x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    probe = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    (block(x) * probe).sum().backward()
    eps_fd = 1e-6
    worst_block = 0.0
    for name, p in block.named_parameters():
        grad = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps_fd
            up = (block(x) * probe).sum().item()
            flat[i] = orig - eps_fd
            down = (block(x) * probe).sum().item()
            flat[i] = orig
            fd = (up - down) / (2 * eps_fd)
            denom = max(abs(fd), abs(grad[i].item()), 1e-8)
            rel = abs(fd - grad[i].item()) / denom
            worst_block = max(worst_block, rel)
            assert rel < 1e-3, (name, int(i), rel)

    # noise predictor: gradient of mean output w.r.t. a sample of y_t entries
    pred = NoisePredictor(in_channels=1, structure_channels=4,
                          widths=(8, 8, 8, 8), emb_dim=16).double()
    y = torch.randn(1, 1, 32, 32, dtype=torch.float64, requires_grad=True)
    xe = torch.randn(1, 4, 32, 32, dtype=torch.float64)
    pred(y, xe, 0.5).mean().backward()
    coords = torch.randint(0, 32, (64, 2), generator=torch.Generator().manual_seed(0))
    worst_pred = 0.0
    with torch.no_grad():
        for r_, c_ in coords:
            orig = y[0, 0, r_, c_].item()
            y[0, 0, r_, c_] = orig + eps_fd
            up = pred(y, xe, 0.5).mean().item()
            y[0, 0, r_, c_] = orig - eps_fd
            down = pred(y, xe, 0.5).mean().item()
            y[0, 0, r_, c_] = orig
            fd = (up - down) / (2 * eps_fd)
            g = y.grad[0, 0, r_, c_].item()
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-9)
            worst_pred = max(worst_pred, rel)
            assert rel < 1e-3

    # weighted loss: analytic gradient and finite differences at
    # non-degenerate points
    torch.manual_seed(2)
    pred_eps = torch.randn(8, 8, dtype=torch.float64, requires_grad=True)
    true_eps = torch.randn(8, 8, dtype=torch.float64)
    w = torch.from_numpy(
        np.where(np.eye(8) > 0, 4.0, 2.0)
    )
    weighted_noise_loss(pred_eps, true_eps, w).backward()
    worst_loss = 0.0
    with torch.no_grad():
        for r_, c_ in [(0, 0), (1, 5), (3, 3), (7, 2)]:
            orig = pred_eps[r_, c_].item()
            pred_eps[r_, c_] = orig + eps_fd
            up = float(weighted_noise_loss(pred_eps, true_eps, w))
            pred_eps[r_, c_] = orig - eps_fd
            down = float(weighted_noise_loss(pred_eps, true_eps, w))
            pred_eps[r_, c_] = orig
            fd = (up - down) / (2 * eps_fd)
            g = pred_eps.grad[r_, c_].item()
            rel = abs(fd - g) / max(abs(fd), abs(g))
            worst_loss = max(worst_loss, rel)
            assert rel < 1e-4
    elapsed = time.time() - start
    assert elapsed < 120.0
    report(
        6,
        f"finite differences: block worst {worst_block:.1e}, predictor worst "
        f"{worst_pred:.1e}, loss worst {worst_loss:.1e} ({elapsed:.0f}s)",
    )


# --- criterion 7: metrics oracle equivalence ----------------------------------


def test_criterion_07_metrics_oracle_equivalence():
    start = time.time()
    r = np.random.default_rng(7)
    for trial in range(200):
        shape = (10, 10, 10)
        dose = r.uniform(0, 70, shape)
        pred = dose + r.normal(0, 3, shape)
        mask = np.zeros(shape, dtype=bool)
        n = int(r.integers(1, 1001))
        mask.ravel()[r.choice(1000, size=n, replace=False)] = True
        x = float(r.uniform(0.5, 100.0))
        level = float(r.uniform(0, 75))
        assert dose_at_volume(dose, mask, x) == oracle_dose_at_volume(dose, mask, x)
        assert volume_at_dose(dose, mask, level) == oracle_volume_at_dose(
            dose, mask, level
        )
        assert dose_score(dose, pred, mask) == oracle_dose_score(dose, pred, mask)
        curve = dvh(dose, mask, bin_width=0.5)
        for b in range(0, curve.dose_bins.size, 29):
            assert curve.fraction[b] * 100.0 == volume_at_dose(
                dose, mask, float(curve.dose_bins[b])
            )

    # scalar cases: HI = 0.08 and 0.0; CI = 0.5, 1.0, 0.0
    vals = np.concatenate(
        [[53.0, 52.0], np.full(47, 51.0), [50.0], np.full(47, 49.0),
         [48.0, 47.0, 47.0]]
    )
    assert hi(vals, np.ones(100, bool)) == pytest.approx(0.08, rel=1e-12)
    assert hi(np.full(10, 42.0), np.ones(10, bool)) == 0.0
    dose_flat = np.zeros(400)
    tv = np.zeros(400, bool)
    tv[:100] = True
    dose_flat[:200] = 51.0
    assert ci(dose_flat, tv, 50.0) == 0.5
    perfect = np.zeros(400)
    perfect[:100] = 51.0
    assert ci(perfect, tv, 50.0) == 1.0
    assert ci(np.zeros(400), tv, 50.0) == 0.0
    elapsed = time.time() - start
    assert elapsed < 30.0
    report(7, f"200 random ROIs match brute-force oracles exactly ({elapsed:.1f}s)")


# --- criterion 8: loss identities ----------------------------------------------


def test_criterion_08_loss_identities():
    r = np.random.default_rng(8)
    a = r.standard_normal((4, 1, 6, 6))
    b = r.standard_normal((4, 1, 6, 6))
    assert weighted_noise_loss(a, b, np.ones_like(a)) == np.abs(a - b).mean()
    true = np.zeros((2, 2))
    w = np.array([[4.0, 2.0], [1.0, 1.0]])
    assert weighted_noise_loss(np.ones((2, 2)), true, w) == 1.0
    assert weighted_noise_loss(np.array([[1.0, 0.0], [0.0, 0.0]]), true, w) == 0.5
    report(8, "unit weights equal plain mean L1; 2x2 hand cases exact")


# --- criteria 9 and 10: end-to-end overfit run ---------------------------------


@pytest.fixture(scope="module")
def overfit_run():
    cfg = desk_profile()
    cfg.data.num_patients = 1
    cfg.data.split = (1, 0, 0)
    cfg.optim.torch_threads = 2
    cfg.seed = 0
    vol = generate_phantom(cfg.data.seed, PhantomParams(shape=cfg.data.shape))
    trainer = Trainer(cfg, [vol])
    t0 = time.time()
    for _ in range(cfg.optim.steps):
        trainer.step()
    train_time = time.time() - t0
    trainer.predictor.eval()
    trainer.encoder.eval()
    scores = {}
    with torch.no_grad():
        for steps in (1, 25, 50, 100):
            pred = predict_volume(
                cfg, trainer.encoder, trainer.predictor, vol, steps=steps, seed=0
            )
            scores[steps] = dose_score(vol.dose, pred.dose, vol.body_mask())
    return cfg, trainer, vol, scores, train_time


def test_criterion_09_overfit_sanity(overfit_run):
    cfg, trainer, vol, scores, train_time = overfit_run
    history = np.array([v for _, v in trainer.history])
    initial = history[:50].mean()
    final = history[-50:].mean()
    assert final <= 0.1 * initial, (initial, final)
    baseline = constant_dose_prediction(vol)
    base_score = dose_score(vol.dose, baseline.dose, vol.body_mask())
    assert scores[50] < base_score, (scores[50], base_score)
    report(
        9,
        f"2000 steps in {train_time / 60:.1f} min; smoothed loss "
        f"{initial:.3f} -> {final:.3f} (ratio {final / initial:.3f} <= 0.1); "
        f"50-step body dose score {scores[50]:.2f} Gy < constant baseline "
        f"{base_score:.2f} Gy",
    )


def test_criterion_10_step_count_trade_off(overfit_run):
    _, _, _, scores, _ = overfit_run
    assert scores[100] <= scores[1], scores
    curve = ", ".join(f"{k}: {scores[k]:.2f} Gy" for k in (1, 25, 50, 100))
    report(10, f"body dose score by reverse steps -> {curve}")


# --- criterion 11: ablation smoke ----------------------------------------------


def test_criterion_11_ablation_smoke(tmp_path):
    volumes = [generate_phantom(s, tiny_phantom_params()) for s in range(2)]
    summaries = []
    for variant in VARIANTS:
        cfg = tiny_config(**{"optim.steps": 100}).apply_variant(variant)
        trainer = Trainer(cfg, volumes)
        for _ in range(cfg.optim.steps):
            trainer.step()
        trainer.predictor.eval()
        if trainer.encoder is not None:
            trainer.encoder.eval()
        test_vol = volumes[-1]
        with torch.no_grad():
            pred = predict_volume(
                cfg, trainer.encoder, trainer.predictor, test_vol, steps=4, seed=0
            )
        out = tmp_path / f"variant_{variant}"
        rep = evaluate_cohort([test_vol], [pred], out)
        assert rep.rows, variant
        assert (out / "metrics_summary.csv").exists()
        body, _ = rep.cohort_dose_scores()["body"]
        summaries.append(f"{variant}: {body:.2f} Gy")
    report(11, "variants trained 100 steps and reported; body scores " + "; ".join(summaries))


# --- criterion 12: checkpoint-resume determinism --------------------------------


def test_criterion_12_resume_determinism(tmp_path):
    volumes = [generate_phantom(s, tiny_phantom_params()) for s in range(2)]
    cfg = tiny_config(**{"optim.torch_threads": 1})
    reference = Trainer(cfg, volumes)
    full = [reference.step() for _ in range(50)]

    first = Trainer(cfg, volumes)
    head = [first.step() for _ in range(25)]
    ckpt = first.save_checkpoint(tmp_path / "mid.pt")
    resumed = Trainer.from_checkpoint(ckpt, volumes)
    tail = [resumed.step() for _ in range(25)]
    assert head + tail == full
    report(12, "checkpoint resume reproduces 50-step loss trajectory bit-for-bit")
