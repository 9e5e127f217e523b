"""Acceptance gate: every shipping criterion with its stated tolerance.

Each test prints one ``[criterion N] PASS ...`` line (visible with -rA or
-s) and enforces its runtime budget.  The desk-scale dataset and training
runs make this module slow by design; run it last.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import jamlab.tensor as T
from jamlab import dataio as D
from jamlab import features as F
from jamlab import metrics as ME
from jamlab import signals as S
from jamlab import training as TR
from jamlab.model import Acb, ModelConfig, build_model, count_params, fuse_acb_branches
from jamlab.seeding import derive_seed, make_rng
from jamlab.training import cross_entropy
from oracles import (finite_difference_gradients, max_relative_error, naive_conv2d,
                     naive_dft, naive_linear)
from test_model import randomize_acb

CLOCK = S.SampleClock(20e6, 20000)
DESK_SEED = 2024
ABLATION_EPOCHS = 6


def report(criterion, detail):
    print(f"[criterion {criterion}] PASS {detail}")


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    """9 classes x JNR {0, 10} dB x 100 realizations at 64 x 64."""
    out = Path(os.environ.get("JAMLAB_DESK_DIR", "")) or tmp_path_factory.mktemp("desk")
    grid = D.GenerationGrid(jnr_min_db=0.0, jnr_max_db=10.0, jnr_step_db=10.0,
                            realizations=100)
    feat = D.FeaturePipelineConfig(image_side=64)
    manifest = D.generate_dataset(grid, CLOCK, feat, DESK_SEED, out,
                                  jobs=max(1, (os.cpu_count() or 1)))
    assert len(manifest) == 1800
    tfi, psd, labels, jnr = D.load_feature_arrays(manifest, out)
    return manifest, TR.FeatureDataset(tfi, psd, labels, jnr)


def test_c01_kernel_fusion_equivalence():
    started = time.time()
    results = {}
    for dtype, tol in ((np.float32, 1e-4), (np.float64, 1e-10)):
        worst = 0.0
        for trial in range(1000):
            rng = make_rng(100, "c1", trial, str(np.dtype(dtype)))
            c_in = int(rng.integers(1, 5))
            c_out = int(rng.integers(1, 6))
            dilation = int(rng.choice([1, 2, 4]))
            acb = Acb("acb", c_in, c_out, dilation=dilation, dtype=dtype,
                      init_seed=trial)
            randomize_acb(acb, rng)
            side = int(rng.integers(2 * dilation + 1, 11))
            x = T.Tensor(rng.standard_normal((2, c_in, side, side)).astype(dtype))
            with T.no_grad():
                pre = acb.forward(x, training=False, pre_activation=True).data
                kernel, bias = fuse_acb_branches(
                    acb.conv3x3.kernel.data, acb.bn3x3,
                    acb.conv1x3.kernel.data, acb.bn1x3,
                    acb.conv3x1.kernel.data, acb.bn3x1,
                )
                fused = T.conv2d(x, T.Tensor(kernel), T.Tensor(bias),
                                 padding=(dilation, dilation),
                                 dilation=dilation).data
            worst = max(worst, float(np.max(np.abs(pre - fused))))
        results[np.dtype(dtype).name] = worst
        assert worst < tol, f"{dtype}: deviation {worst:.3e} exceeds {tol}"
    elapsed = time.time() - started
    assert elapsed < 60.0, f"took {elapsed:.1f}s, budget 60s"
    report(1, f"max deviation float32 {results['float32']:.2e} (<1e-4), "
              f"float64 {results['float64']:.2e} (<1e-10), {elapsed:.0f}s")


def test_c02_gradient_suite():
    started = time.time()

    # per-op checks on small shapes, every element
    rng = make_rng(101, "c2-ops")

    def check(params, loss_fn, label):
        for p in params.values():
            p.grad = None
        loss_fn().backward()
        fd = finite_difference_gradients(lambda: float(loss_fn().data), params)
        worst, where = max_relative_error(fd, params)
        assert worst < 1e-3, f"{label}: {worst:.2e} at {where}"
        return worst

    x4 = T.Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True, name="x")
    k = T.Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, name="k")
    kb = T.Tensor(rng.standard_normal(3), requires_grad=True, name="kb")
    w = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True, name="w")
    wb = T.Tensor(rng.standard_normal(4), requires_grad=True, name="wb")
    gamma = T.Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True, name="gamma")
    beta = T.Tensor(rng.standard_normal(2), requires_grad=True, name="beta")
    # probe constants frozen up front: the loss must be a fixed function
    probe4 = T.Tensor(rng.standard_normal((2, 2, 5, 5)))
    probe_conv = T.Tensor(rng.standard_normal((2, 3, 3, 3)))
    probe_soft = T.Tensor(rng.standard_normal((4, 25)))
    probe_gap = T.Tensor(rng.standard_normal((2, 2)))
    probe_lin = T.Tensor(rng.standard_normal((2, 4)))
    probe_cat = T.Tensor(rng.standard_normal((2, 100)))
    one = T.Tensor(np.float64(1.0))

    op_cases = {
        "conv2d": ({"x": x4, "k": k, "kb": kb},
                   lambda: T.tsum(T.mul(T.conv2d(x4, k, kb, stride=2,
                                                 padding=(1, 1)), probe_conv))),
        "batchnorm": ({"x": x4, "gamma": gamma, "beta": beta},
                      lambda: T.tsum(T.mul(
                          T.batchnorm2d(x4, gamma, beta, np.zeros(2), np.ones(2),
                                        training=True), probe4))),
        "swish": ({"x": x4}, lambda: T.tsum(T.mul(T.swish(x4), probe4))),
        "sigmoid": ({"x": x4}, lambda: T.tsum(T.mul(T.sigmoid(x4), probe4))),
        "relu": ({"x": x4}, lambda: T.tsum(T.mul(T.relu(x4), probe4))),
        "softmax": ({"x": x4},
                    lambda: T.tsum(T.mul(T.softmax(T.reshape(x4, (4, 25)), axis=1),
                                         probe_soft))),
        "gap": ({"x": x4},
                lambda: T.tsum(T.mul(T.global_avg_pool(x4), probe_gap))),
        "linear": ({"w": w, "wb": wb},
                   lambda: T.tsum(T.mul(
                       T.linear(T.global_avg_pool(T.conv2d(x4, k, kb,
                                                           padding=(1, 1))), w, wb),
                       probe_lin))),
        "add_mul_div_exp_log": ({"x": x4},
                                lambda: T.tsum(T.div(
                                    T.mul(T.exp(x4), T.add(x4, probe4)),
                                    T.add(T.log(T.add(T.exp(x4), one)), one)))),
        "dropout_passthrough": ({"x": x4},
                                lambda: T.tsum(T.mul(
                                    T.dropout(T.swish(x4), 0.6, training=False),
                                    probe4))),
        "concat": ({"x": x4},
                   lambda: T.tsum(T.mul(
                       T.concat([T.reshape(x4, (2, 50)),
                                 T.reshape(T.mul(x4, x4), (2, 50))], axis=1),
                       probe_cat))),
    }
    op_worst = 0.0
    for label, (params, fn) in op_cases.items():
        op_worst = max(op_worst, check(params, fn, label))

    # end-to-end: every parameter of a width-reduced full-topology model
    cfg = ModelConfig(input_side=16, stft_stem=2, stft_stages=(3, 4, 5, 6),
                      psd_stem=2, psd_stages=(2, 3), head_hidden=8, num_classes=9,
                      dropout_p=0.6)
    model = build_model(cfg, dtype=np.float64, init_seed=3)
    data_rng = make_rng(102, "c2-model")
    x = T.Tensor(data_rng.standard_normal((1, 1, 16, 16)))
    y = T.Tensor(data_rng.standard_normal((1, 1, 16, 16)))
    labels = np.array([4])
    params = model.named_parameters()
    total = sum(p.data.size for p in params.values())

    def loss_fn():
        return cross_entropy(model.forward(x, y, training=False), labels)

    for p in params.values():
        p.grad = None
    loss_fn().backward()
    fd = finite_difference_gradients(lambda: float(loss_fn().data), params)
    worst, where = max_relative_error(fd, params)
    assert worst < 1e-3, f"end-to-end: {worst:.2e} at {where}"

    elapsed = time.time() - started
    assert elapsed < 600.0, f"took {elapsed:.1f}s, budget 600s"
    report(2, f"ops worst {op_worst:.2e}, end-to-end worst {worst:.2e} over "
              f"{total} params (<1e-3), {elapsed:.0f}s")


def test_c03_signal_calibration():
    started = time.time()
    worst_power = 0.0
    worst_jnr = 0.0
    for trial in range(100):
        rng = make_rng(103, "c3", trial)
        label = S.COMPOUND_CLASSES[trial % 9]
        jnr_db = float(rng.uniform(-25.0, 15.0))
        spec = S.draw_compound(label, CLOCK, rng, (-3.0, 3.0))
        mixture = S.mix_compound(spec, CLOCK, rng)
        worst_power = max(worst_power, abs(S.measure_power(mixture) - 1.0))
        noisy = S.add_awgn(mixture, S.NoiseSpec(jnr_db), rng)
        noise = noisy.samples - mixture.samples
        measured = 10.0 * np.log10(
            S.measure_power(mixture) / float(np.mean(np.abs(noise) ** 2))
        )
        worst_jnr = max(worst_jnr, abs(measured - jnr_db))
    assert worst_power < 1e-10, f"mixture power off by {worst_power:.2e}"
    assert worst_jnr <= 0.2, f"JNR off by {worst_jnr:.3f} dB"
    elapsed = time.time() - started
    assert elapsed < 60.0, f"took {elapsed:.1f}s, budget 60s"
    report(3, f"100 draws: power error {worst_power:.1e} (<1e-10), "
              f"JNR error {worst_jnr:.3f} dB (<=0.2), {elapsed:.0f}s")


def test_c04_spectral_oracles():
    started = time.time()
    # STFT frames against the O(N^2) DFT
    rng = make_rng(104, "c4-stft")
    n = 60
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    sig = S.ComplexSignal(x, S.SampleClock(20e6, n))
    cfg = F.StftConfig(window_len=16, hop=7, fft_size=32)
    mat = F.stft(sig, cfg)
    window = F.hann_window(16)
    stft_err = 0.0
    for m in range(mat.shape[0]):
        ref = naive_dft(x[m * 7 : m * 7 + 16] * window, 32)
        stft_err = max(stft_err, float(np.max(np.abs(mat[m] - ref))))
    assert stft_err < 1e-9

    # Welch density of white noise over >= 50 averaged segments
    rng = make_rng(104, "c4-welch")
    n = 2048 * 26
    noise = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2.0)
    sig = S.ComplexSignal(noise, S.SampleClock(20e6, n))
    welch_cfg = F.WelchConfig()
    segments = (n - welch_cfg.segment_len) // welch_cfg.step + 1
    assert segments >= 50
    est = F.welch_psd(sig, welch_cfg)
    target = 1.0 / 20e6
    welch_err = abs(float(np.mean(est.power_density)) - target) / target
    assert welch_err < 0.10

    # partial-band noise concentrates its energy in band
    jam = S.synth_band_noise(S.PartialBandNoise(1.0, 0.0, 0.25 * 20e6), CLOCK,
                             make_rng(104, "c4-pbnj"))
    spectrum = np.abs(np.fft.fft(jam.samples)) ** 2
    freqs = np.fft.fftfreq(CLOCK.num_samples, d=1.0 / 20e6)
    in_band = float(spectrum[np.abs(freqs) <= 2.5e6].sum() / spectrum.sum())
    assert in_band >= 0.90

    elapsed = time.time() - started
    assert elapsed < 60.0, f"took {elapsed:.1f}s, budget 60s"
    report(4, f"STFT vs DFT {stft_err:.1e} (<1e-9), Welch {100 * welch_err:.1f}% "
              f"(<10%) over {segments} segments, in-band {100 * in_band:.1f}% "
              f"(>=90%), {elapsed:.0f}s")


def _split_sets(manifest, dataset, seed):
    split_seed = derive_seed(seed, "split")
    train_idx, val_idx, test_idx = TR.split_dataset(manifest, (0.8, 0.1, 0.1),
                                                    split_seed)
    return dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx)


def test_c05_desk_scale_learning(desk_dataset):
    started = time.time()
    manifest, dataset = desk_dataset
    train_set, val_set, test_set = _split_sets(manifest, dataset, DESK_SEED)
    assert len(train_set) == 1440 and len(test_set) == 180
    model = build_model(ModelConfig.desk_scale(),
                        init_seed=derive_seed(DESK_SEED, "init", 0))
    cfg = TR.TrainConfig(epochs=20, batch_size=64, lr_max=1e-3,
                         master_seed=DESK_SEED)
    history = TR.fit(model, train_set, val_set, cfg,
                     log_fn=lambda r: print(f"  epoch {r['epoch']}: "
                                            f"val acc {r['val_accuracy']:.3f}"),
                     stop_at_val_accuracy=0.995)
    _, accuracy, _ = TR.evaluate(model, test_set)
    oa = 100.0 * accuracy
    elapsed = time.time() - started
    assert oa >= 90.0, f"test OA {oa:.2f}% below 90%"
    assert elapsed < 3600.0, f"took {elapsed:.0f}s, budget 3600s"
    report(5, f"test OA {oa:.2f}% (>=90%) after {len(history)} epochs, "
              f"{elapsed:.0f}s")


def test_c06_ablation_ordering(desk_dataset):
    started = time.time()
    manifest, dataset = desk_dataset
    keep = np.array([i for i, rec in enumerate(manifest.records)
                     if int(rec.sample_id.rsplit("_r", 1)[1]) < 50])
    sub_records = [manifest.records[i] for i in keep]
    sub_data = dataset.subset(keep)
    split_seed = derive_seed(DESK_SEED, "split-ablate")
    train_idx, val_idx, test_idx = TR.split_dataset(sub_records, (0.8, 0.1, 0.1),
                                                    split_seed)
    train_set = sub_data.subset(train_idx)
    val_set = sub_data.subset(val_idx)
    test_set = sub_data.subset(test_idx)
    variants = ("full", "no_se_fusion", "no_psd_stream", "no_sk_acb")
    means = {}
    for variant in variants:
        accs = []
        for run in range(3):
            model = build_model(ModelConfig.desk_scale(), variant=variant,
                                init_seed=derive_seed(DESK_SEED, "ablate", variant,
                                                      run))
            cfg = TR.TrainConfig(epochs=ABLATION_EPOCHS, batch_size=64, lr_max=1e-3,
                                 master_seed=derive_seed(DESK_SEED, "ablate-run",
                                                         run))
            TR.fit(model, train_set, val_set, cfg)
            _, accuracy, _ = TR.evaluate(model, test_set)
            accs.append(100.0 * accuracy)
        means[variant] = float(np.mean(accs))
        print(f"  {variant}: runs {['%.1f' % a for a in accs]} "
              f"mean {means[variant]:.2f}%")
    assert means["full"] >= means["no_se_fusion"], (
        f"full {means['full']:.2f} < no_se_fusion {means['no_se_fusion']:.2f}"
    )
    assert means["no_se_fusion"] >= max(means["no_psd_stream"], means["no_sk_acb"]), (
        f"no_se_fusion {means['no_se_fusion']:.2f} below a reduced variant: "
        f"{means}"
    )
    elapsed = time.time() - started
    report(6, "ordering full >= no_se_fusion >= max(no_psd_stream, no_sk_acb): "
              + ", ".join(f"{v} {means[v]:.2f}%" for v in variants)
              + f", {elapsed:.0f}s")


def test_c07_parameter_count():
    model = build_model(ModelConfig.paper_scale())
    total = count_params(model)
    reported = 10.63e6
    deviation = abs(total - reported) / reported
    print(f"  full-scale config: {ModelConfig.paper_scale()}")
    print(f"  realized parameter count: {total:,}")
    assert deviation <= 0.20, f"{total:,} deviates {100 * deviation:.1f}% from 10.63M"
    report(7, f"params {total:,} within {100 * deviation:.1f}% of 10.63M (<=20%)")


def test_c08_flops_audit():
    # three-layer toy network: conv, strided conv, linear
    rng = make_rng(108, "c8")
    x = rng.standard_normal((1, 1, 6, 6))
    k1 = rng.standard_normal((2, 1, 3, 3))
    k2 = rng.standard_normal((3, 2, 3, 3))
    h1, macs1 = naive_conv2d(x, k1, padding=(1, 1), count_macs=True)
    h2, macs2 = naive_conv2d(h1, k2, stride=2, padding=(1, 1), count_macs=True)
    flat = h2.reshape(1, -1)
    w = rng.standard_normal((5, flat.shape[1]))
    _, macs3 = naive_linear(flat, w, count_macs=True)

    report_obj = ME.FlopsReport()
    report_obj.add_conv("conv1", h1.shape[2], h1.shape[3], 3, 3, 1, 2)
    report_obj.add_conv("conv2", h2.shape[2], h2.shape[3], 3, 3, 2, 3)
    report_obj.add_linear("fc", flat.shape[1], 5)
    assert report_obj.conv_total == 2 * (macs1 + macs2)
    assert report_obj.linear_total == 2 * macs3 - 5  # (2*N_in - 1) * N_out
    assert report_obj.total == report_obj.conv_total + report_obj.linear_total
    report(8, f"conv FLOPs {report_obj.conv_total} == 2 x {macs1 + macs2} MACs; "
              f"linear {report_obj.linear_total} == (2N-1) convention")


def test_c09_metrics_correctness():
    rng = make_rng(109, "c9")
    checked = 0
    matrices = [
        np.diag([5, 3, 2]),
        np.array([[8, 2], [1, 9]]),
        np.array([[5, 5], [0, 10]]),
        np.ones((9, 9), dtype=np.int64),
        np.array([[4, 0], [0, 0]]),
    ]
    while len(matrices) < 20:
        k = int(rng.integers(2, 10))
        matrices.append(rng.integers(0, 30, (k, k)))
    for counts in matrices:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.sum() == 0:
            counts[0, 0] = 1
        k = counts.shape[0]
        cm = ME.ConfusionMatrix(counts.copy(), tuple(f"c{i}" for i in range(k)))
        got = ME.precision_recall_f1(cm)
        # hand evaluation, written directly from the definitions
        for i in range(k):
            tp = int(counts[i, i])
            fp = int(counts[:, i].sum()) - tp
            fn = int(counts[i, :].sum()) - tp
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn) if tp + fn else 0.0
            f1 = (2 * precision * recall / (precision + recall)
                  if precision > 0 and recall > 0 else 0.0)
            assert got[i].precision == precision
            assert got[i].recall == recall
            assert got[i].f1 == f1
        assert ME.overall_accuracy(cm) == 100.0 * np.trace(counts) / counts.sum()
        checked += 1
    assert checked == 20
    report(9, "precision/recall/F1/OA exact on 20 hand-computed matrices")


def _run_cli(args, env_extra=None):
    env = dict(os.environ)
    env["OPENBLAS_NUM_THREADS"] = "1"
    env["OMP_NUM_THREADS"] = "1"
    if env_extra:
        env.update(env_extra)
    proc = subprocess.run([sys.executable, "-m", "jamlab", *args],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, f"jamlab {args[0]} failed: {proc.stderr}"
    return proc


def test_c10_determinism(tmp_path):
    sets = [
        "--set", "grid.classes=[\"STJ_LFM\", \"MTJ_Pulse\", \"LFM_PBNJ\"]",
        "--set", "grid.jnr_min_db=5", "--set", "grid.jnr_max_db=5",
        "--set", "grid.realizations=10",
        "--set", "features.image_side=32",
        "--set", "model.channel_divisor=8", "--set", "model.head_hidden=16",
        "--set", "train.epochs=1", "--set", "train.batch_size=8",
    ]
    checkpoints = []
    manifests = []
    for run in ("a", "b"):
        data_dir = tmp_path / f"data_{run}"
        train_dir = tmp_path / f"train_{run}"
        _run_cli(["synth", "--seed", "77", "--out", str(data_dir), *sets])
        _run_cli(["train", "--manifest", str(data_dir / "manifest.txt"),
                  "--seed", "77", "--out", str(train_dir), *sets])
        manifests.append((data_dir / "manifest.txt").read_bytes())
        checkpoints.append((train_dir / "checkpoint.jlc").read_bytes())
    assert manifests[0] == manifests[1], "manifests differ between identical runs"
    assert checkpoints[0] == checkpoints[1], "checkpoints differ between runs"

    # worker count must not change the manifest
    jobs_dir = tmp_path / "data_jobs2"
    _run_cli(["synth", "--seed", "77", "--jobs", "2", "--out", str(jobs_dir), *sets])
    assert (jobs_dir / "manifest.txt").read_bytes() == manifests[0]
    report(10, "bit-identical checkpoints across runs; manifest invariant to --jobs")
