"""Release acceptance gate.

Nine criteria, one printed pass/fail line each.  Criteria 4-6 train real
models on one CPU core and dominate the runtime (roughly an hour total);
run this file on its own when gating a release:

    pytest tests/test_acceptance.py -v

Everything here goes through public package APIs only.
"""

import os
import time

import numpy as np
import pytest
from click.testing import CliRunner

from hvfi import data as hdata
from hvfi.autodiff import Tensor, bilinear_resize, concat, no_grad, sigmoid
from hvfi.cli import _gradcheck_registry, main as cli_main
from hvfi.checkpoint import apply_params, load_checkpoint, save_checkpoint
from hvfi.deformconv import DeformableKernel, deform_conv, oracle_deform_conv
from hvfi.gradcheck import gradcheck
from hvfi.hvit import HVITBConfig, RCAB, WindowAttention, HVITB
from hvfi.losses import census_loss, gt_pyramid, total_loss
from hvfi.metrics import eval_run, oracle_ssim, psnr, ssim
from hvfi.pipeline import HVFIModel, ModelConfig, TGR, UDBlock, upscale_dek, update_dek
from hvfi.train import TrainConfig, train

from test_hvit import _naive_window_attention

# Experiment budgets (single CPU core).  The overfit experiment stops as soon
# as it hits its target; the ablations use a fixed matched budget.
OVERFIT_MAX_STEPS = 2000
OVERFIT_MAX_SECONDS = 1800
ABLATION_STEPS = 500


def _report(num, name, ok, detail, capsys):
    line = f"[criterion {num}] {'PASS' if ok else 'FAIL'} {name}: {detail}"
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert ok, line


def _f64(module):
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
    return module


def _train_psnr_l1(model, dataset):
    ps, l1s = [], []
    with no_grad():
        for trip in dataset:
            states = model.forward(Tensor(trip.frame_a[None]),
                                   Tensor(trip.frame_b[None]))
            out = np.clip(states[-1].stage_output.data[0], 0.0, 1.0)
            ps.append(psnr(out, trip.target))
            l1s.append(float(np.abs(out - trip.target).mean()))
    return float(np.mean(ps)), float(np.mean(l1s))


def _held_out_psnr(model, dataset):
    ps = []
    with no_grad():
        for trip in dataset:
            out = model.interpolate(Tensor(trip.frame_a[None]),
                                    Tensor(trip.frame_b[None]))[0]
            ps.append(psnr(out, trip.target))
    return float(np.mean(ps))


# --------------------------------------------------------------------------
# 1. Gradient suite: every differentiable operation passes double-precision
#    central finite-difference checks at rel err < 1e-4 (1e-3 where the
#    layer-norm epsilon dominates).  Runtime budget: 5 minutes.
# --------------------------------------------------------------------------

def test_criterion_1_gradient_suite(capsys):
    t0 = time.time()
    failures = []

    for name, (fn, make) in _gradcheck_registry().items():
        tol = 1e-3 if name == "layer_norm" else 1e-4
        rep = gradcheck(fn, make(), tol=tol, max_elems=80)
        if not rep.passed:
            failures.append(f"{name} ({rep.max_error:.2e})")

    rng = np.random.default_rng(5)
    t = lambda *s: Tensor(rng.standard_normal(s), requires_grad=True)

    attn = _f64(WindowAttention(8, 4, 2, rng, kv_windows=2))
    rep = gradcheck(lambda x, c: attn(x, c), [t(1, 8, 8, 8), t(1, 8, 8, 8)],
                    max_elems=50)
    if not rep.passed:
        failures.append(f"window_attention ({rep.max_error:.2e})")

    rcab = _f64(RCAB(4, 1, rng))
    rep = gradcheck(lambda x: rcab(x), [t(1, 4, 6, 6)], max_elems=60)
    if not rep.passed:
        failures.append(f"rcab ({rep.max_error:.2e})")

    blk = _f64(HVITB(HVITBConfig(8, 4, 2), rng, cross=True))
    rep = gradcheck(lambda x, c: blk(x, c), [t(1, 8, 8, 8), t(1, 8, 8, 8)],
                    max_elems=40, tol=1e-3)
    if not rep.passed:
        failures.append(f"hvitb ({rep.max_error:.2e})")

    cfg = ModelConfig(levels=1, embed_dim=8, udblock_width=8, kernel_size=3,
                      cab_count=1)
    ud = _f64(UDBlock(cfg, rng))
    dek_up = tuple(DeformableKernel.zeros(3, 8, 8, dtype=np.float64)
                   for _ in range(2))

    def ud_fn(feat, f0, f1):
        delta, inter = ud(dek_up, feat, (f0, f1))
        parts = []
        for d in delta:
            parts += [d.x_offsets, d.y_offsets, d.kernel_v, d.kernel_h, d.mask]
        parts += [w[0] for w in inter]
        return concat(parts, axis=0)

    rep = gradcheck(ud_fn, [t(1, 8, 8, 8), t(1, 3, 8, 8), t(1, 3, 8, 8)],
                    max_elems=40, tol=1e-3)
    if not rep.passed:
        failures.append(f"udblock ({rep.max_error:.2e})")

    tgr = _f64(TGR(cfg, rng))

    def tgr_fn(i0, i1, f0, f1):
        fused, mask, bias = tgr((i0, i1), (f0, f1))
        return concat([fused, mask, bias], axis=1)

    rep = gradcheck(tgr_fn, [t(1, 3, 8, 8), t(1, 3, 8, 8),
                             t(1, 3, 8, 8), t(1, 3, 8, 8)],
                    max_elems=30, tol=1e-3)
    if not rep.passed:
        failures.append(f"tgr ({rep.max_error:.2e})")

    dt = time.time() - t0
    ok = not failures and dt < 300
    _report(1, "gradient suite", ok,
            f"{len(failures)} failures {failures}, {dt:.0f}s (budget 300s)",
            capsys)


# --------------------------------------------------------------------------
# 2. Oracle equivalence: the vectorized deformable convolution, window
#    attention and SSIM match their brute-force loop references.
# --------------------------------------------------------------------------

def test_criterion_2_oracle_equivalence(capsys):
    rng = np.random.default_rng(42)
    worst_deform = 0.0
    for _ in range(50):
        n = int(rng.choice([3, 5]))
        c = int(rng.integers(1, 5))
        h = int(rng.integers(n, 17))
        w = int(rng.integers(n, 17))
        frame = Tensor(rng.uniform(0, 1, (1, c, h, w)).astype(np.float64))
        mk = lambda ch, s: Tensor(rng.standard_normal((ch, h, w)) * s)
        dek = DeformableKernel(mk(n * n, 2.0), mk(n * n, 2.0), mk(n, 1.0),
                               mk(n, 1.0), sigmoid(mk(n * n, 1.0)), n)
        with no_grad():
            fast = deform_conv(frame, dek).data
            slow = oracle_deform_conv(frame, dek).data
        worst_deform = max(worst_deform, float(np.abs(fast - slow).max()))

    attn = WindowAttention(8, 4, 2, rng, kv_windows=2)
    x = rng.standard_normal((1, 8, 8, 8)).astype(np.float64)
    ctx = rng.standard_normal((1, 8, 8, 8)).astype(np.float64)
    with no_grad():
        fast = attn(Tensor(x), Tensor(ctx)).data
    worst_attn = float(np.abs(fast - _naive_window_attention(attn, x, ctx)).max())

    worst_ssim = 0.0
    for _ in range(3):
        a = rng.uniform(0, 1, (3, 24, 24))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        worst_ssim = max(worst_ssim, abs(ssim(a, b) - oracle_ssim(a, b)))

    ok = worst_deform < 1e-6 and worst_attn < 1e-5 and worst_ssim < 1e-6
    _report(2, "oracle equivalence", ok,
            f"deform {worst_deform:.2e} (<1e-6), attention {worst_attn:.2e} "
            f"(<1e-5), ssim {worst_ssim:.2e} (<1e-6)", capsys)


# --------------------------------------------------------------------------
# 3. Identity and propagation invariants: the neutral kernel field is an
#    exact identity, and with zero residuals after stage 1 the final offsets
#    equal the stage-1 offsets upsampled with value scale 2^(L-1).
# --------------------------------------------------------------------------

def test_criterion_3_identity_and_propagation(capsys):
    rng = np.random.default_rng(3)
    frame = Tensor(rng.uniform(0, 1, (1, 3, 9, 11)).astype(np.float32))
    ident = DeformableKernel.identity(5, 9, 11, dtype=np.float32)
    with no_grad():
        out = deform_conv(frame, ident).data
    identity_exact = bool(np.array_equal(out, frame.data))

    levels, n = 3, 3
    mk = lambda c: Tensor(rng.standard_normal((c, 4, 4)).astype(np.float32))
    dek = DeformableKernel(mk(9), mk(9), mk(3), mk(3), mk(9), n)
    with no_grad():
        cur = dek
        for _ in range(levels - 1):
            cur = upscale_dek(cur)
            zeros = DeformableKernel.zeros(n, *cur.spatial)
            cur = update_dek(cur, DeformableKernel(
                zeros.x_offsets, zeros.y_offsets,
                cur.kernel_v, cur.kernel_h, cur.mask, n), residual=True)
        expect_x = dek.x_offsets
        for _ in range(levels - 1):
            expect_x = bilinear_resize(expect_x, 2)
        expect_x = expect_x.data * 2 ** (levels - 1)
    prop_err = float(np.abs(cur.x_offsets.data - expect_x).max())

    ok = identity_exact and prop_err < 1e-5
    _report(3, "identity and offset propagation", ok,
            f"identity exact={identity_exact}, propagation err {prop_err:.2e} "
            f"(<1e-5)", capsys)


# --------------------------------------------------------------------------
# 4. Overfit experiment: the toy model (3 levels, embed 16, kernel 5) must
#    reach mean final-stage L1 < 0.02 and PSNR > 32 dB on 8 training
#    triplets (motion <= 12 px) within 2000 steps and 30 CPU-minutes.
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit_run():
    ds = hdata.gen_synthetic(8, 64, (2.0, 12.0), seed=11)
    mc = ModelConfig(levels=3, embed_dim=16, kernel_size=5)
    tc = TrainConfig(lr=1e-3, epochs=OVERFIT_MAX_STEPS, batch_size=1, crop=64,
                     seed=0, checkpoint_every=10 ** 9,
                     max_steps=OVERFIT_MAX_STEPS, augment=False)
    t0 = time.time()
    result = {"steps": 0, "psnr": 0.0, "l1": 1.0}

    def cb(step, value, l1s):
        result["steps"] = step
        if step % 50:
            return False
        p, l1 = _train_psnr_l1(cb.model, ds)
        result.update(psnr=p, l1=l1)
        return (p > 32.0 and l1 < 0.02) or time.time() - t0 > OVERFIT_MAX_SECONDS

    # train() builds the model; grab it on the first callback via closure
    import hvfi.train as train_mod
    orig = train_mod.HVFIModel

    def hook(cfg):
        cb.model = orig(cfg)
        return cb.model

    train_mod.HVFIModel = hook
    try:
        model, _ = train(tc, mc, ds, callback=cb)
    finally:
        train_mod.HVFIModel = orig
    result["seconds"] = time.time() - t0
    p, l1 = _train_psnr_l1(model, ds)
    result.update(psnr=max(result["psnr"], p), l1=min(result["l1"], l1))
    result["model"] = model
    result["dataset"] = ds
    return result


def test_criterion_4_overfit(overfit_run, capsys):
    r = overfit_run
    ok = (r["l1"] < 0.02 and r["psnr"] > 32.0
          and r["steps"] <= OVERFIT_MAX_STEPS
          and r["seconds"] < OVERFIT_MAX_SECONDS)
    _report(4, "overfit experiment", ok,
            f"L1 {r['l1']:.4f} (<0.02), PSNR {r['psnr']:.2f} dB (>32), "
            f"{r['steps']} steps (<=2000), {r['seconds']:.0f}s (<1800)", capsys)


# --------------------------------------------------------------------------
# 5./6. Ablations on a held-out 16-24 px motion set under identical budgets:
#    the 3-level model must beat a parameter-matched single-level model by
#    >= 1.0 dB, and the residual kernel update must beat per-stage direct
#    regression by >= 0.3 dB.
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation_runs():
    train_ds = hdata.gen_synthetic(8, 64, (8.0, 24.0), seed=101)
    held_out = hdata.gen_synthetic(6, 64, (16.0, 24.0), seed=202)
    configs = {
        "multi": ModelConfig(levels=3, embed_dim=16, kernel_size=5),
        # parameter budget matched to "multi" within ~1% (262k vs 259k)
        "single": ModelConfig(levels=1, embed_dim=28, udblock_width=28,
                              cab_count=5, kernel_size=5),
        "direct": ModelConfig(levels=3, embed_dim=16, kernel_size=5,
                              residual_update=False),
    }
    out = {}
    for name, mc in configs.items():
        tc = TrainConfig(lr=1e-3, epochs=ABLATION_STEPS, batch_size=1,
                         crop=64, seed=0, checkpoint_every=10 ** 9,
                         max_steps=ABLATION_STEPS, augment=False)
        model, _ = train(tc, mc, train_ds)
        out[name] = _held_out_psnr(model, held_out)
    return out


def test_criterion_5_multiscale_ablation(ablation_runs, capsys):
    gap = ablation_runs["multi"] - ablation_runs["single"]
    ok = gap >= 1.0
    _report(5, "multi-scale ablation", ok,
            f"3-level {ablation_runs['multi']:.2f} dB vs 1-level "
            f"{ablation_runs['single']:.2f} dB, gap {gap:.2f} (>=1.0)", capsys)


def test_criterion_6_residual_update_ablation(ablation_runs, capsys):
    gap = ablation_runs["multi"] - ablation_runs["direct"]
    ok = gap >= 0.3
    _report(6, "residual-update ablation", ok,
            f"residual {ablation_runs['multi']:.2f} dB vs direct "
            f"{ablation_runs['direct']:.2f} dB, gap {gap:.2f} (>=0.3)", capsys)


# --------------------------------------------------------------------------
# 7. Protocol trend: PSNR over synthetic intervals 1..4 (motion growing with
#    the interval) is monotonically non-increasing for the trained toy model.
# --------------------------------------------------------------------------

def test_criterion_7_interval_trend(overfit_run, capsys):
    model = overfit_run["model"]
    dataset = []
    for i in range(1, 5):
        dataset += hdata.gen_synthetic(6, 64, (2.0 + 6.0 * (i - 1), 6.0 * i),
                                       seed=300 + i, interval=i)

    def predict(fa, fb):
        with no_grad():
            return model.interpolate(Tensor(fa[None]), Tensor(fb[None]))[0]

    report = eval_run(predict, dataset, intervals=(1, 2, 3, 4))
    vals = [report.per_interval[i]["psnr"] for i in range(1, 5)]
    ok = all(vals[i] >= vals[i + 1] for i in range(3))
    _report(7, "interval trend", ok,
            "PSNR by interval " + ", ".join(f"{v:.2f}" for v in vals), capsys)


# --------------------------------------------------------------------------
# 8. Determinism and serialization: same-seed training repeats the epoch-1
#    loss to 1e-6; checkpoints round-trip bit-exactly; the interpolation
#    command writes byte-identical files across runs.
# --------------------------------------------------------------------------

def test_criterion_8_determinism(capsys, tmp_path):
    ds = hdata.gen_synthetic(2, 32, (1.0, 4.0), seed=7)
    mc = ModelConfig(levels=2, embed_dim=8, udblock_width=8, kernel_size=3,
                     cab_count=1)
    tc = TrainConfig(lr=1e-3, epochs=1, batch_size=2, crop=32, seed=0,
                     checkpoint_every=10 ** 9)
    model_a, log_a = train(tc, mc, ds)
    model_b, log_b = train(tc, mc, ds)
    loss_a = float(log_a[0].split("\t")[1])
    loss_b = float(log_b[0].split("\t")[1])
    seed_ok = abs(loss_a - loss_b) < 1e-6

    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(str(ckpt), mc.to_dict(),
                    [(n, p.data) for n, p in model_a.named_parameters()],
                    step=3)
    loaded = load_checkpoint(str(ckpt))
    model_c = HVFIModel(ModelConfig.from_dict(loaded.config))
    apply_params(model_c, loaded.params)
    ckpt_ok = all(
        pa.data.tobytes() == pc.data.tobytes()
        for (_, pa), (_, pc) in zip(model_a.named_parameters(),
                                    model_c.named_parameters()))

    data_dir = tmp_path / "d"
    hdata.save_dataset(ds, str(data_dir))
    frame0 = os.path.join(str(data_dir), os.listdir(str(data_dir))[0],
                          "frame_a.png")
    frame1 = frame0.replace("frame_a", "frame_b")
    runner = CliRunner()
    outs = []
    for k in range(2):
        out = tmp_path / f"out{k}.png"
        res = runner.invoke(cli_main, ["interp", "--model", str(ckpt),
                                       "--frame0", frame0, "--frame1", frame1,
                                       "--out", str(out)])
        assert res.exit_code == 0, res.output
        outs.append(out.read_bytes())
    interp_ok = outs[0] == outs[1]

    ok = seed_ok and ckpt_ok and interp_ok
    _report(8, "determinism and serialization", ok,
            f"seed repeat |d|={abs(loss_a - loss_b):.1e} (<1e-6), checkpoint "
            f"bit-exact={ckpt_ok}, interp byte-identical={interp_ok}", capsys)


# --------------------------------------------------------------------------
# 9. Loss properties: the census loss ignores non-clipping global brightness
#    shifts; the total loss has its L1 component at exactly zero when every
#    stage output equals the downsampled target.
# --------------------------------------------------------------------------

def test_criterion_9_loss_properties(capsys):
    rng = np.random.default_rng(9)
    a = Tensor(rng.uniform(0.2, 0.7, (1, 3, 16, 16)).astype(np.float32))
    b = Tensor(rng.uniform(0.2, 0.7, (1, 3, 16, 16)).astype(np.float32))
    with no_grad():
        base = float(census_loss(a, b).data)
        shifted = float(census_loss(Tensor(a.data + 0.1), b).data)
    census_err = abs(base - shifted)

    gt = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
    with no_grad():
        outs = gt_pyramid(gt, 3)
        _, l1s, _ = total_loss(outs, gt)
        zero_ok = all(v == 0.0 for v in l1s)
        bumped = [Tensor(o.data + 0.01) for o in outs]
        _, l1s_b, _ = total_loss(bumped, gt)
        pos_ok = all(v > 0.0 for v in l1s_b)

    ok = census_err < 1e-6 and zero_ok and pos_ok
    _report(9, "loss properties", ok,
            f"census shift |d|={census_err:.1e} (<1e-6), zero-at-target="
            f"{zero_ok}, positive-off-target={pos_ok}", capsys)
