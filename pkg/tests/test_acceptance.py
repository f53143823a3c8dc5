"""Acceptance suite. Each criterion prints one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The toy end-to-end
training (A5) runs twice so that A7 can compare the two runs bit for bit;
both runs together stay well inside the stated runtime budget.
"""

import json
import math
import time
import urllib.error
import urllib.request

import numpy as np
import pytest
from PIL import Image

from cxinpaint import metrics as M
from cxinpaint.cli import main as cli_main
from cxinpaint.data import (composite_center, load_patch_store, mask_batch,
                            synthetic_texture_corpus)
from cxinpaint.layers import (BatchNormState, ConvParams, activation_backward,
                              activation_forward, batchnorm2d_backward,
                              batchnorm2d_forward, conv2d_backward,
                              conv2d_forward, deconv2d_backward,
                              deconv2d_forward)
from cxinpaint.loss import (LossWeights, MaskSpec, adv_loss_discriminator,
                            adv_loss_discriminator_backward,
                            adv_loss_generator, adv_loss_generator_backward,
                            joint_loss, minimax_value, weighted_l2,
                            weighted_l2_backward)
from cxinpaint.models import (ModelConfig, build_discriminator,
                              build_generator, generate, load_checkpoint,
                              save_checkpoint)
from cxinpaint.optim import (TraceRecord, Trainer, TrainSchedule, TrainState,
                             balance_report)
from cxinpaint.study import StudyPair, StudyServer
from cxinpaint.tensor import Rng, Tensor

from gradcheck import finite_difference, rel_err

TOY_SEED = 123


def check(name, cond, detail):
    print(f"{name} {'PASS' if cond else 'FAIL'}: {detail}")
    assert cond, f"{name}: {detail}"


# ---------------------------------------------------------------------- A1

def test_a1_gradient_suite():
    t0 = time.time()
    worst_layer = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)

        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        p = ConvParams(Tensor(rng.normal(size=(3, 2, 4, 4))),
                       Tensor(rng.normal(size=3)), stride=2, padding=1)
        out = conv2d_forward(x, p)
        g = conv2d_backward(x, p, Tensor(np.ones(out.shape)))

        def conv_loss():
            return float(conv2d_forward(x, p).array.sum())

        for analytic, arr in ((g.grad_input, x.array),
                              (g.grad_weights, p.weights.array),
                              (g.grad_bias, p.bias.array)):
            worst_layer = max(worst_layer, rel_err(
                analytic.array, finite_difference(conv_loss, arr)))

        xd = Tensor(rng.normal(size=(1, 3, 3, 3)))
        pd = ConvParams(p.weights, Tensor(rng.normal(size=2)), 2, 1)
        outd = deconv2d_forward(xd, pd)
        gd = deconv2d_backward(xd, pd, Tensor(np.ones(outd.shape)))

        def deconv_loss():
            return float(deconv2d_forward(xd, pd).array.sum())

        for analytic, arr in ((gd.grad_input, xd.array),
                              (gd.grad_weights, pd.weights.array),
                              (gd.grad_bias, pd.bias.array)):
            worst_layer = max(worst_layer, rel_err(
                analytic.array, finite_difference(deconv_loss, arr)))

        xb = Tensor(rng.normal(size=(2, 3, 4, 4)))
        s = BatchNormState.init(3)
        s.gamma.array[:] = rng.normal(1.0, 0.2, size=3)
        s.beta.array[:] = rng.normal(size=3)
        gy = Tensor(rng.normal(size=(2, 3, 4, 4)))

        def bn_loss():
            out = batchnorm2d_forward(xb, s, train=True, update_running=False)
            return float((out.array * gy.array).sum())

        gb = batchnorm2d_backward(xb, s, gy, train=True)
        for analytic, arr in ((gb.grad_input, xb.array),
                              (gb.grad_weights, s.gamma.array),
                              (gb.grad_bias, s.beta.array)):
            worst_layer = max(worst_layer, rel_err(
                analytic.array, finite_difference(bn_loss, arr)))

        for kind in ("leaky_relu", "relu", "tanh", "sigmoid"):
            xa = rng.normal(size=30)
            xa = Tensor(xa + np.where(xa >= 0, 1e-2, -1e-2))
            ga = Tensor(rng.normal(size=30))

            def act_loss():
                return float((activation_forward(kind, xa).array
                              * ga.array).sum())

            an = activation_backward(kind, xa, ga)
            worst_layer = max(worst_layer, rel_err(
                an.array, finite_difference(act_loss, xa.array)))

    worst_loss = 0.0
    mask = MaskSpec(8, 2, 10.0)
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        real = Tensor(rng.normal(size=(2, 1, 8, 8)))
        fake = Tensor(rng.normal(size=(2, 1, 8, 8)))

        def l2_loss():
            return weighted_l2(real, fake, mask)

        g = weighted_l2_backward(real, fake, mask)
        worst_loss = max(worst_loss, rel_err(
            g.array, finite_difference(l2_loss, fake.array)))

        sf = Tensor(rng.uniform(0.05, 0.95, size=4))

        def gen_loss():
            return adv_loss_generator(sf)

        worst_loss = max(worst_loss, rel_err(
            adv_loss_generator_backward(sf).array,
            finite_difference(gen_loss, sf.array)))

        sr = Tensor(rng.uniform(0.05, 0.95, size=4))
        sf2 = Tensor(rng.uniform(0.05, 0.95, size=4))

        def disc_loss():
            return adv_loss_discriminator(sr, sf2)

        gr, gf = adv_loss_discriminator_backward(sr, sf2)
        worst_loss = max(worst_loss, rel_err(
            gr.array, finite_difference(disc_loss, sr.array)))
        worst_loss = max(worst_loss, rel_err(
            gf.array, finite_difference(disc_loss, sf2.array)))

    elapsed = time.time() - t0
    check("A1", worst_layer < 1e-4 and worst_loss < 1e-5 and elapsed < 120,
          f"layer grads {worst_layer:.2e} (<1e-4), loss grads "
          f"{worst_loss:.2e} (<1e-5), 20 seeds, {elapsed:.1f}s (<120s)")


# ---------------------------------------------------------------------- A2

def test_a2_bottleneck_and_output_shapes():
    cfg = ModelConfig(image_size=128)  # reference defaults: 128 base channels
    g = build_generator(cfg, Rng(0))
    x = Tensor(np.zeros((1, 1, 128, 128), dtype=np.float32))
    latent = g.encode(x)
    out = generate(g, x)
    check("A2", latent.shape == (1, 4096, 1, 1) and out.shape == (1, 1, 64, 64),
          f"bottleneck {latent.shape} == (1, 4096, 1, 1), "
          f"output {out.shape} == (1, 1, 64, 64)")


# ---------------------------------------------------------------------- A3

def test_a3_loss_closed_forms():
    m = MaskSpec(64, 4, 10.0)
    l2 = weighted_l2(Tensor(np.ones((1, 1, 64, 64))),
                     Tensor(np.zeros((1, 1, 64, 64))), m)
    exact = l2 == 12736 / 4096
    mm = minimax_value(Tensor(np.array([0.5])), Tensor(np.array([0.5])))
    mm_ok = abs(mm - (-math.log(4))) < 1e-9
    w = LossWeights()
    joint_ok = joint_loss(1.0, 0.0, w) == 0.998 and \
        joint_loss(0.0, 1.0, w) == 0.002
    check("A3", exact and mm_ok and joint_ok,
          f"weighted_l2 {l2} == {12736 / 4096}, minimax {mm:.12f} ~ -log4, "
          f"lambdas ({w.lambda_l2}, {w.lambda_adv})")


# ---------------------------------------------------------------------- A4

def brute_force_ssim(a, b, window=11, sigma=1.5):
    w = M.gaussian_window(window, sigma)
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    h, wd = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(wd - window + 1):
            pa = a[i:i + window, j:j + window]
            pb = b[i:i + window, j:j + window]
            mu_a = float((w * pa).sum())
            mu_b = float((w * pb).sum())
            var_a = float((w * pa * pa).sum()) - mu_a ** 2
            var_b = float((w * pb * pb).sum()) - mu_b ** 2
            cov = float((w * pa * pb).sum()) - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1)
                           * (var_a + var_b + c2)))
    return float(np.mean(vals))


def test_a4_metric_oracles():
    mse_ok = M.mse(Tensor(np.zeros((8, 8))), Tensor(np.full((8, 8), 10.0))) \
        == 100.0
    p = M.psnr(Tensor(np.zeros((8, 8))), Tensor(np.full((8, 8), 10.0)))
    psnr_ok = abs(p - 10 * math.log10(255.0 ** 2 / 100.0)) < 1e-9

    rng = np.random.default_rng(4242)
    worst = 0.0
    self_ok = True
    for _ in range(50):
        a = rng.uniform(0, 255, size=(32, 32))
        b = np.clip(a + rng.normal(0, 25, size=(32, 32)), 0, 255)
        got = M.ssim(Tensor(a), Tensor(b))
        worst = max(worst, abs(got - brute_force_ssim(a, b)))
        self_ok = self_ok and M.ssim(Tensor(a), Tensor(a)) == \
            pytest.approx(1.0, abs=1e-12)
    check("A4", mse_ok and psnr_ok and worst < 1e-6 and self_ok,
          f"mse exact, psnr within 1e-9, ssim vs brute force {worst:.2e} "
          f"(<1e-6) on 50 random 32x32 pairs, ssim(a,a)=1")


# ------------------------------------------------------------------ A5 / A7

def run_toy_training(tmp_dir, tag):
    """Synthetic 2,000-patch corpus, reference warmup schedule, then joint."""
    t0 = time.time()
    root = Rng(TOY_SEED)
    cfg = ModelConfig(image_size=32, base_channels_g=16, base_channels_d=16,
                      dtype="float64")
    gen = build_generator(cfg, root.child(1))
    disc = build_discriminator(cfg, root.child(2))
    sched = TrainSchedule(epochs_g_l2_only=2, epochs_d_only=4,
                          total_epochs=36, batch_size=64)
    trainer = Trainer(gen, disc, sched, LossWeights(), MaskSpec(16, 4, 10.0),
                      root.child(3))
    corpus = synthetic_texture_corpus(2000, 32, root.child(4))
    train, val, held = corpus[:1880], corpus[1880:1950], corpus[1950:]
    v_init = trainer.validation_l2(val)
    for _ in range(sched.total_epochs):
        trainer.train_epoch(train)
    v_final = trainer.validation_l2(val)
    ckpt_path = tmp_dir / f"toy_{tag}.ckpt"
    save_checkpoint(ckpt_path, gen, disc, trainer.optimizer_arrays(),
                    trainer.counters())
    return {
        "trainer": trainer, "gen": gen, "cfg": cfg, "held": held,
        "v_init": v_init, "v_final": v_final,
        "ckpt_bytes": ckpt_path.read_bytes(),
        "elapsed": time.time() - t0,
    }


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    tmp_dir = tmp_path_factory.mktemp("toy")
    return run_toy_training(tmp_dir, "run1"), run_toy_training(tmp_dir, "run2")


def diff_maps_for(gen, batch):
    ctx, _, _ = mask_batch(batch)
    fake, _ = gen.forward(Tensor(ctx), train=False)
    maps = []
    for j in range(batch.shape[0]):
        recon = composite_center(Tensor(batch[j:j + 1]),
                                 Tensor(fake.array[j:j + 1]))
        maps.append(M.diff_map(M.to_intensity(Tensor(batch[j, 0])),
                               M.to_intensity(Tensor(recon.array[0, 0]))).array)
    return np.stack(maps)


def test_a5_toy_end_to_end(toy_runs):
    run = toy_runs[0]
    iters = run["trainer"].state.iteration
    ratio = run["v_final"] / run["v_init"]

    held = run["held"]
    healthy = held[:50].copy()
    corrupted = held[:50].copy()
    blob0 = (32 - 6) // 2
    corrupted[:, :, blob0:blob0 + 6, blob0:blob0 + 6] = 1.0  # bright 6x6 blob

    dh = diff_maps_for(run["gen"], healthy)
    dc = diff_maps_for(run["gen"], corrupted)
    intensity_ratio = dh.mean() / dc.mean()

    inside, outside = [], []
    for j in range(dc.shape[0]):
        i, o = M.anomaly_energy(Tensor(dc[j]), (blob0, blob0, 6, 6))
        inside.append(i)
        outside.append(o)
    energy_ratio = np.mean(inside) / np.mean(outside)

    total_elapsed = toy_runs[0]["elapsed"] + toy_runs[1]["elapsed"]
    ok = (iters <= 3000 and ratio < 0.5 and intensity_ratio < 0.5
          and energy_ratio > 3 and total_elapsed < 1800)
    check("A5", ok,
          f"{iters} iters (<=3000), val L2 {run['v_init']:.4f}->"
          f"{run['v_final']:.4f} (ratio {ratio:.3f} <0.5), healthy/corrupted "
          f"diff intensity {intensity_ratio:.3f} (<0.5), anomaly energy "
          f"in/out {energy_ratio:.1f} (>3), both runs {total_elapsed:.0f}s "
          f"(<1800s)")


# ---------------------------------------------------------------------- A6

def test_a6_balancing_behaviors():
    root = Rng(808)
    cfg = ModelConfig(image_size=16, base_channels_g=2, base_channels_d=2,
                      dtype="float64")
    gen = build_generator(cfg, root.child(1))
    disc = build_discriminator(cfg, root.child(2))
    sched = TrainSchedule(0, 0, 4, freeze_g_every=2, batch_size=4)
    trainer = Trainer(gen, disc, sched, LossWeights(), MaskSpec(8, 2, 10.0),
                      root.child(3))
    patches = synthetic_texture_corpus(4, 16, root.child(4))

    freeze_ok = True
    for _ in range(8):
        it = trainer.state.iteration
        before = [t.array.copy() for t in gen.named_params().values()]
        before += [t.array.copy() for t in gen.named_buffers().values()]
        trainer._iteration(patches)
        after = [t.array for t in gen.named_params().values()]
        after += [t.array for t in gen.named_buffers().values()]
        unchanged = all(np.array_equal(a, b) for a, b in zip(before, after))
        frozen = (it + 1) % 2 == 0
        freeze_ok = freeze_ok and (frozen == unchanged)

    state = TrainState()
    mm = minimax_value(Tensor(np.array([0.5])), Tensor(np.array([0.5])))
    state.records = [TraceRecord(0, i, 0.0, 0.0, 0.0, mm, 0.5, 0.5)
                     for i in range(10)]
    rep = balance_report(state, window=10)
    balance_ok = rep.classification == "balanced" and \
        abs(rep.minimax_mean + math.log(4)) <= 1e-6
    check("A6", freeze_ok and balance_ok,
          f"generator bit-unchanged on frozen iterations (freeze_g_every=2); "
          f"balance at constant 0.5 scores -> {rep.classification} with "
          f"V {rep.minimax_mean:.9f}")


# ---------------------------------------------------------------------- A7

def test_a7_reproducibility(toy_runs):
    r1, r2 = toy_runs
    traces_equal = r1["trainer"].state.records == r2["trainer"].state.records
    ckpt_equal = r1["ckpt_bytes"] == r2["ckpt_bytes"]
    check("A7", traces_equal and ckpt_equal,
          f"two seeded runs: traces bit-identical={traces_equal}, "
          f"final checkpoints byte-identical={ckpt_equal}")


# ---------------------------------------------------------------------- A8

def test_a8_pipeline_determinism(tmp_path):
    rng = np.random.default_rng(99)
    images_dir = tmp_path / "images"
    images_dir.mkdir()
    rows = ["image,labels,patient_id"]
    for k in range(3):
        name = f"scan_{k}.png"
        Image.fromarray(rng.integers(0, 256, (256, 256), dtype=np.uint8),
                        mode="L").save(images_dir / name, format="PNG")
        rows.append(f"{name},,p{k}")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n")

    outs = []
    for run in ("one", "two"):
        out = tmp_path / run
        rc = cli_main(["extract-patches", "--manifest", str(manifest),
                       "--images-dir", str(images_dir), "--out", str(out),
                       "--patches-per-image", "20", "--patch-size", "32",
                       "--seed", "5"])
        assert rc == 0
        outs.append(out)
    index_equal = (outs[0] / "patch_index.csv").read_bytes() == \
        (outs[1] / "patch_index.csv").read_bytes()
    store_equal = (outs[0] / "patches.cxpd").read_bytes() == \
        (outs[1] / "patches.cxpd").read_bytes()

    pixels, _ = load_patch_store(outs[0] / "patches.cxpd")
    ctx, tgt, msk = mask_batch(pixels.astype(np.float64))
    rebuilt = ctx * (1 - msk)
    lo = pixels.shape[-1] // 4
    hi = lo + pixels.shape[-1] // 2
    rebuilt[..., lo:hi, lo:hi] += tgt
    identity = np.array_equal(rebuilt, pixels.astype(np.float64))
    check("A8", index_equal and store_equal and identity,
          f"rerun byte-identical: index={index_equal} store={store_equal}; "
          f"masking partition identity on all {pixels.shape[0]} patches: "
          f"{identity}")


# ---------------------------------------------------------------------- A9

def _http(method, url, body=None):
    req = urllib.request.Request(url, method=method)
    data = json.dumps(body).encode() if body is not None else None
    try:
        with urllib.request.urlopen(req, data=data) as resp:
            raw = resp.read()
            ctype = resp.headers.get("Content-Type", "")
            return resp.status, json.loads(raw) if "json" in ctype else raw
    except urllib.error.HTTPError as e:
        raw = e.read()
        try:
            return e.code, json.loads(raw)
        except json.JSONDecodeError:
            return e.code, raw


def test_a9_study_flow_over_http(tmp_path):
    rng = np.random.default_rng(77)
    pairs = []
    for k in range(10):
        orig = tmp_path / f"o{k}.png"
        recon = tmp_path / f"r{k}.png"
        Image.fromarray(rng.integers(0, 256, (8, 8), dtype=np.uint8),
                        mode="L").save(orig, format="PNG")
        Image.fromarray(rng.integers(0, 256, (8, 8), dtype=np.uint8),
                        mode="L").save(recon, format="PNG")
        pairs.append(StudyPair(original=orig, reconstructed=recon))
    server = StudyServer(pairs, results_path=tmp_path / "log.jsonl", seed=3)
    server.start()
    try:
        base = f"http://127.0.0.1:{server.port}"
        _, created = _http("POST", f"{base}/session")
        sid = created["session_id"]
        session = server.registry.sessions[sid]

        leak_free = True
        # fixed rule: correct on trials 0..5, wrong on 6..9 -> 6/10
        for k, trial in enumerate(session.trials):
            status, payload = _http("GET", f"{base}/session/{sid}/trial/{k}")
            text = json.dumps(payload)
            leak_free = leak_free and "orig" not in text \
                and "recon" not in text and ".png" not in text
            right = "left" if trial.original_on_left else "right"
            wrong = "right" if trial.original_on_left else "left"
            status, _ = _http("POST",
                              f"{base}/session/{sid}/trial/{k}/response",
                              {"choice": right if k < 6 else wrong})
            assert status == 200
        dbl_status, _ = _http("POST", f"{base}/session/{sid}/trial/0/response",
                              {"choice": "left"})
        _, report = _http("GET", f"{base}/session/{sid}/report")
        ok = (report["correct"] == 6 and report["accuracy"] == 0.6
              and dbl_status == 409 and leak_free)
        check("A9", ok,
              f"scripted 10-trial session: accuracy {report['accuracy']} "
              f"(hand-computed 0.6), double answer -> {dbl_status} (409), "
              f"payload leak-free={leak_free}")
    finally:
        server.stop()
