"""Acceptance suite: one test per criterion, each printing a PASS line.

The desk-scale runs share a module-scoped 20-phantom corpus. Every tolerance
is pinned here; nothing defers to later calibration. Run with `pytest -s
tests/test_acceptance.py` to watch the per-criterion lines.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from spinelabel import inference, localizer, metrics, phantom, reformation, volume_io
from spinelabel.adversaries import (EnergyAutoencoder, EBDConfig, WassersteinCritic,
                                    WDConfig, gradient_penalty, margin_schedule)
from spinelabel.core import AnnotationSet, attach_background, label_from_index
from spinelabel.networks import ButterflyConfig, build_model, load_checkpoint
from spinelabel.training import TrainConfig, lr_at, train
from spinelabel.training import draw_augment

# desk-scale configuration (criterion 7): all knobs are config-exposed fields
DESK_SCANS = 20
DESK_ITERS = 2000
DESK_SIGMA_MM = 10.0
DESK_MODEL = ButterflyConfig(base_filters=12, bottleneck_channels=192)
DESK_SEED = 7


def _report(criterion: int, description: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"\n[ACCEPTANCE {criterion}] {status} - {description}{suffix}")
    assert passed, f"criterion {criterion}: {description}{suffix}"


# ---------------------------------------------------------------------------
# criterion 1: metric-oracle equivalence


def _oracle_flags(pred: AnnotationSet, truth: AnnotationSet, d_th: float):
    flags = {}
    for v in truth.labels():
        if v not in pred:
            flags[v] = False
            continue
        p = np.asarray(pred.position(v))
        dists = [np.linalg.norm(p - truth.position(u)) for u in truth.labels()]
        d_v = np.linalg.norm(p - truth.position(v))
        flags[v] = bool(d_v < d_th and d_v <= min(dists))
    return flags


def test_criterion_1_metric_oracle_equivalence():
    rng = np.random.default_rng(123)
    start = time.time()
    exact = True
    for _ in range(200):
        n_t = int(rng.integers(1, 27))
        n_p = int(rng.integers(0, 27))
        truth = AnnotationSet({label_from_index(int(i)): tuple(rng.uniform(0, 150, 3))
                               for i in rng.choice(26, n_t, replace=False) + 1})
        pred = AnnotationSet({label_from_index(int(i)): tuple(rng.uniform(0, 150, 3))
                              for i in rng.choice(26, n_p, replace=False) + 1})
        oracle = _oracle_flags(pred, truth, 20.0)
        if metrics.identify(pred, truth, 20.0) != oracle:
            exact = False
        tp = sum(oracle.values())
        p_o = tp / len(pred) if len(pred) else 1.0
        r_o = tp / len(truth)
        f_o = 2 * p_o * r_o / (p_o + r_o) if p_o + r_o > 0 else 0.0
        if metrics.precision_recall(pred, truth, 20.0) != (p_o, r_o, f_o):
            exact = False
        common = [l for l in truth.labels() if l in pred]
        if common:
            ds = np.array([np.linalg.norm(np.asarray(pred.position(l))
                                          - truth.position(l)) for l in common])
            mean, std, _ = metrics.localization_distances(pred, truth)
            if not (math.isclose(mean, ds.mean(), rel_tol=0, abs_tol=0)
                    and math.isclose(std, ds.std(), rel_tol=0, abs_tol=0)):
                exact = False
    elapsed = time.time() - start
    _report(1, "identify/precision_recall/localization_distances match the "
               "brute-force oracle on 200 random sets",
            exact and elapsed < 10.0, f"{elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 2: fusion equivalence + threshold monotonicity


def test_criterion_2_fusion_oracle_and_monotonicity():
    rng = np.random.default_rng(7)
    max_err = 0.0
    for _ in range(5):
        sag = rng.random((8, 8, 26))
        cor = rng.random((8, 8, 26))
        fused = inference.fuse(sag, cor)
        expected = np.empty((8, 8, 8, 26))
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    for c in range(26):
                        expected[i, j, k, c] = sag[i, j, c] * cor[i, k, c]
        max_err = max(max_err, float(np.abs(fused - expected).max()))
    monotone = True
    from spinelabel.core import Volume

    small = Volume(np.zeros((6, 5, 7), np.float32), (2, 2, 2))
    for trial in range(100):
        sag = attach_background(rng.random((6, 5, 26)), 4.0)
        cor = attach_background(rng.random((6, 7, 26)), 4.0)
        previous = None
        for t in (0.0, 0.25, 0.5, 0.75):
            fused = inference.fuse(inference.threshold_heatmap(sag, t),
                                   inference.threshold_heatmap(cor, t))
            labels = set(inference.extract_centroids(fused, small)[0].labels())
            if previous is not None and not labels <= previous:
                monotone = False
            previous = labels
    _report(2, "fuse() matches the triple-loop oracle exactly and raising T "
               "only shrinks the prediction set",
            max_err == 0.0 and monotone, f"max_abs_err={max_err}")


# ---------------------------------------------------------------------------
# criterion 3: heatmap identities


def test_criterion_3_heatmap_identities(lumbar_phantom):
    vol, ann = lumbar_phantom
    sigma = 4.0
    stack = reformation.make_heatmap_3d(vol, ann, sigma)
    bg_err = float(np.abs(stack.data[..., 0]
                          - (1.0 - stack.data[..., 1:].max(-1))).max())
    peaks_ok = True
    sigma_ok = True
    for label in ann.labels():
        idx = vol.physical_to_voxel(ann.position(label))
        if stack.data[idx[0], idx[1], idx[2], label.index] != 1.0:
            peaks_ok = False
        # a voxel exactly sigma away along axis 0 (sigma = 2 voxels at 2 mm)
        off = (idx[0] + 2, idx[1], idx[2])
        val = stack.data[off[0], off[1], off[2], label.index]
        if abs(val - math.exp(-0.5)) > 1e-9:
            sigma_ok = False
    for view in ("sagittal", "coronal"):
        proj = reformation.project_heatmap(stack, view)
        bg_err = max(bg_err, float(np.abs(proj.data[..., 0]
                                          - (1 - proj.data[..., 1:].max(-1))).max()))
    _report(3, "constructed stacks satisfy the background complement to 1e-12, "
               "peak 1 at centroids, exp(-1/2) at radius sigma",
            bg_err <= 1e-12 and peaks_ok and sigma_ok, f"bg_err={bg_err:.2e}")


# ---------------------------------------------------------------------------
# criterion 4: gradient-penalty correctness


def test_criterion_4_gradient_penalty():
    # exact zero for an analytic Lipschitz-1 linear critic
    u = torch.zeros(26, 4, 4, dtype=torch.float64)
    u[3, 1, 2] = 1.0

    class Linear(torch.nn.Module):
        def forward(self, x):
            return (x.flatten(1) * u.flatten()).sum(dim=1)

    y = torch.rand(3, 26, 4, 4, dtype=torch.float64)
    gp = gradient_penalty(Linear(), y, torch.rand_like(y), 10.0,
                          torch.Generator().manual_seed(0))
    exact_zero = float(gp) == 0.0

    # autodiff gradient matches central finite differences on toy critics
    toys = [
        lambda z: (torch.tanh(z) * torch.tensor([1.5, -0.5, 0.75])).sum(dim=1),
        lambda z: (z ** 3).sum(dim=1) * 0.1 + torch.sin(z).sum(dim=1),
        lambda z: (z * torch.tensor([2.0, 0.0, -1.0])).sum(dim=1),
    ]
    rel_err = 0.0
    point = torch.tensor([[0.4, -0.9, 1.3]], dtype=torch.float64)
    for toy in toys:
        x = point.clone().requires_grad_(True)
        grad, = torch.autograd.grad(toy(x).sum(), x)
        fd = torch.zeros_like(point)
        eps = 1e-6
        for i in range(3):
            hi, lo = point.clone(), point.clone()
            hi[0, i] += eps
            lo[0, i] -= eps
            fd[0, i] = (toy(hi).sum() - toy(lo).sum()) / (2 * eps)
        rel_err = max(rel_err, float((grad.norm() - fd.norm()).abs() / fd.norm()))
    _report(4, "gradient norms match central finite differences within 1e-4; "
               "penalty exactly 0 for a Lipschitz-1 linear critic",
            exact_zero and rel_err < 1e-4, f"rel_err={rel_err:.2e}")


# ---------------------------------------------------------------------------
# criterion 5: SPP arithmetic


def test_criterion_5_spp_arithmetic():
    critic = WassersteinCritic(WDConfig(base_channels=4))
    lengths = []
    scalars = True
    for hw in ((16, 16), (24, 40), (36, 20)):
        x = torch.rand(2, 1, 26, *hw)
        lengths.append(critic.spp_features(x).shape[1])
        scalars &= critic(x).shape == (2,)
    ok = lengths == [1820, 1820, 1820] and scalars
    _report(5, "SPP feature length is 1820 (91 bins x 20 channels) across "
               "input sizes; output is one scalar", ok, f"lengths={lengths}")


# ---------------------------------------------------------------------------
# criterion 6: schedules


def test_criterion_6_schedules():
    cfg = TrainConfig()
    lr_ok = (lr_at(0, cfg) == 1e-3
             and abs(lr_at(10000, cfg) - 0.75e-3) < 1e-12
             and lr_at(60000, cfg) == cfg.lr_floor == 0.2e-3)
    m_ok = (margin_schedule(0, 80000, 10.0) == 10.0
            and margin_schedule(80000, 80000, 10.0) == 0.0)
    _report(6, "learning-rate staircase hits 1e-3 / 0.75e-3 / floored 0.2e-3; "
               "margin decays m0 -> 0", lr_ok and m_ok)


# ---------------------------------------------------------------------------
# criteria 7 and 10 share the desk-scale corpus


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    manifest = phantom.generate_dataset(root / "data", DESK_SCANS, "mixed",
                                        seed=DESK_SEED, spacing_mm=18.0,
                                        split=(1.0, 0.0, 0.0))
    prepared = reformation.prepare_dataset(manifest, root / "prep",
                                           n_projections=2,
                                           sigma_mm=DESK_SIGMA_MM, seed=1)
    scans = []
    for entry in json.loads(manifest.read_text())["scans"]:
        scans.append((entry["id"],
                      volume_io.load_volume(root / "data" / entry["volume"]),
                      AnnotationSet.load(root / "data" / entry["annotations"])))
    return {"root": root, "manifest": manifest, "prepared": prepared, "scans": scans}


def _train_desk(desk_corpus, mode: str, out_name: str):
    cfg = TrainConfig(mode=mode, total_iters=DESK_ITERS, batch_size=4, seed=0,
                      augment=False, val_every=10 ** 9, checkpoint_every=10 ** 9)
    return train(desk_corpus["prepared"], desk_corpus["root"] / out_name, cfg,
                 DESK_MODEL), cfg


def _train_id_rate(model, scans) -> float:
    preds, truths = {}, {}
    for sid, vol, ann in scans:
        preds[sid] = inference.predict_scan(model, vol).annotations
        truths[sid] = ann
    return metrics.pooled_id_rate(preds, truths)


def test_criterion_7_desk_scale_overfit(desk_corpus):
    start = time.time()
    out, _ = _train_desk(desk_corpus, "plain", "run_plain")
    model, _ = load_checkpoint(out["model"])
    rate = _train_id_rate(model, desk_corpus["scans"])
    elapsed = time.time() - start
    _report(7, f"plain training on {DESK_SCANS} phantoms, {DESK_ITERS} iters at "
               f"2 mm reaches id rate >= 90% on the training set",
            rate >= 90.0 and elapsed < 7200.0,
            f"id_rate={rate:.1f}%, {elapsed / 60:.1f} min")


def _adversary_batch(desk_corpus, model, n=6):
    """Real and generated 26-channel view stacks from the first scans."""
    from spinelabel.adversaries import heatmap_to_adversary_input

    reals, fakes = [], []
    for sid, vol, ann in desk_corpus["scans"][:n]:
        vol2 = reformation.preprocess_volume(vol, 2.0)
        target = reformation.view_targets(vol2, ann, DESK_SIGMA_MM)["sagittal"]
        images = inference.view_images(vol2)
        stacks = inference.forward_views(model, images)
        t = torch.from_numpy(np.moveaxis(target.data, -1, 0)[None]).float()
        p = torch.from_numpy(np.moveaxis(stacks["sagittal"].data, -1, 0)[None]).float()
        reals.append(heatmap_to_adversary_input(t, clamp=True))
        fakes.append(heatmap_to_adversary_input(p))
    return reals, fakes


def test_criterion_7b_pe_eb_completes_with_consistent_energies(desk_corpus):
    out, cfg = _train_desk(desk_corpus, "pe_eb", "run_pe_eb")
    finite = all(np.isfinite(r["l2"]) and np.isfinite(r["adv_d"])
                 and np.isfinite(r["adv_g"]) for r in out["rows"])
    state = torch.load(out["train_state"], map_location="cpu", weights_only=False)
    model, _ = load_checkpoint(out["model"])
    torch.manual_seed(0)
    fresh = EnergyAutoencoder(EBDConfig(margin_initial=cfg.margin_initial)).eval()
    trained = EnergyAutoencoder(EBDConfig(margin_initial=cfg.margin_initial)).eval()
    trained.load_state_dict(state["discriminators"]["sagittal"])
    reals, _ = _adversary_batch(desk_corpus, model)
    with torch.no_grad():
        e_fresh = float(torch.cat([fresh.energy(r)[0] for r in reals]).mean())
        e_trained = float(torch.cat([trained.energy(r)[0] for r in reals]).mean())
    _report(7, "pe_eb completes the same run without NaN and the trained "
               "discriminator assigns real targets lower energy than at init "
               "(Eq. 2 direction)",
            finite and e_trained < e_fresh,
            f"E_real init={e_fresh:.2f} -> trained={e_trained:.2f}")


def test_criterion_7c_pe_w_completes_with_consistent_scores(desk_corpus):
    out, cfg = _train_desk(desk_corpus, "pe_w", "run_pe_w")
    finite = all(np.isfinite(r["l2"]) and np.isfinite(r["adv_d"])
                 and np.isfinite(r["adv_g"]) for r in out["rows"])
    state = torch.load(out["train_state"], map_location="cpu", weights_only=False)
    model, _ = load_checkpoint(out["model"])
    critic = WassersteinCritic(WDConfig(gp_lambda=cfg.gp_lambda)).eval()
    critic.load_state_dict(state["discriminators"]["sagittal"])
    reals, fakes = _adversary_batch(desk_corpus, model)
    with torch.no_grad():
        d_real = float(torch.cat([critic(r) for r in reals]).mean())
        d_fake = float(torch.cat([critic(f) for f in fakes]).mean())
    _report(7, "pe_w completes the same run without NaN and the trained critic "
               "scores real targets above generated ones (Eq. 4 direction)",
            finite and d_real > d_fake,
            f"D(real)={d_real:.2f} > D(fake)={d_fake:.2f}")


# ---------------------------------------------------------------------------
# criterion 8: fusion-arm sensitivity


def test_criterion_8_fusion_arm_sensitivity():
    torch.manual_seed(3)
    small = ButterflyConfig(base_filters=8, bottleneck_channels=64)
    fused_model = build_model(small).eval()
    baseline = build_model(ButterflyConfig(base_filters=8, bottleneck_channels=64,
                                           arms_fused=False)).eval()
    g = torch.Generator().manual_seed(0)
    sag = torch.randn(1, 1, 48, 32, generator=g)
    cor = torch.randn(1, 1, 48, 32, generator=g)
    bump = torch.zeros_like(cor)
    bump[0, 0, 20, 15] = 1e-2
    with torch.no_grad():
        d_fused = float((fused_model(sag, cor)[0]
                         - fused_model(sag, cor + bump)[0]).abs().max())
        d_base = float((baseline(sag, cor)[0]
                        - baseline(sag, cor + bump)[0]).abs().max())
    _report(8, "coronal perturbation changes sagittal output for the butterfly "
               "(> 1e-6) and not at all for the Cor.+Sag. baseline",
            d_fused > 1e-6 and d_base == 0.0,
            f"butterfly={d_fused:.2e}, baseline={d_base}")


# ---------------------------------------------------------------------------
# criterion 9: localizer pipeline on rib phantoms


def test_criterion_9_localizer_pipeline(tmp_path):
    manifest = phantom.generate_dataset(tmp_path / "ribs", 10, "thoracic",
                                        seed=4, include_ribs=True,
                                        spacing_mm=20.0, split=(1.0, 0.0, 0.0))
    cfg = localizer.LocalizerTrainConfig(total_iters=1200, batch_size=2, seed=0,
                                         base_channels=8, checkpoint_every=10 ** 9)
    summary = localizer.train_localizer(manifest, tmp_path / "loc", cfg)
    model, _ = localizer.load_localizer(summary["checkpoint"])

    entries = json.loads(manifest.read_text())["scans"]
    detected = 0
    rib_ok = True
    naive_has_ribs = True
    for entry in entries:
        vol = volume_io.load_volume(tmp_path / "ribs" / entry["volume"])
        ann = AnnotationSet.load(tmp_path / "ribs" / entry["annotations"])
        vol4 = localizer.preprocess_for_localizer(vol, cfg.resolution_mm)
        heat = localizer.predict_heatmap(model, vol4)
        pred_box = localizer.extract_bbox(heat, pad_vox=5)
        true_box = localizer.extract_bbox(localizer.localizer_target(vol4, ann),
                                          pad_vox=5)
        if localizer.box_iou(pred_box, true_box) > 0.5:
            detected += 1
        # occlusion check on the 2 mm labelling grid through the real pipeline
        vol2, box2, _ = inference.localized_inputs(vol, vol4, heat, pred_box, 2.0)
        ribs = phantom.rib_mask(vol2, ann)
        from spinelabel.core import Volume

        rib_vol = Volume(ribs.astype(np.float32), vol2.spacing, vol2.origin)
        for view in ("sagittal", "coronal"):
            naive = reformation.project(rib_vol, reformation.ProjectionSpec(view=view))
            local = reformation.project(rib_vol, reformation.ProjectionSpec(
                view=view, kind="localized_mip", box=box2))
            naive_has_ribs &= bool(naive.max() > 0)
            rib_ok &= bool(local.max() == 0)
    _report(9, "localizer trained <= 5k iters boxes >= 9/10 rib phantoms at "
               "IoU > 0.5 and localized MIPs are occluder-free where naive "
               "MIPs are not",
            detected >= 9 and rib_ok and naive_has_ribs,
            f"detected={detected}/10")


# ---------------------------------------------------------------------------
# criterion 10: determinism


def test_criterion_10_determinism(desk_corpus, tmp_path):
    # phantom datasets reproduce bit-exactly
    a = phantom.generate_dataset(tmp_path / "a", 3, "mixed", seed=99, spacing_mm=16.0)
    b = phantom.generate_dataset(tmp_path / "b", 3, "mixed", seed=99, spacing_mm=16.0)
    phantoms_equal = True
    for entry_a, entry_b in zip(json.loads(a.read_text())["scans"],
                                json.loads(b.read_text())["scans"]):
        va = volume_io.load_volume(tmp_path / "a" / entry_a["volume"])
        vb = volume_io.load_volume(tmp_path / "b" / entry_b["volume"])
        phantoms_equal &= bool(np.array_equal(va.data, vb.data))
        phantoms_equal &= ((tmp_path / "a" / entry_a["annotations"]).read_text()
                           == (tmp_path / "b" / entry_b["annotations"]).read_text())

    cfg = TrainConfig()
    draws_a = [draw_augment(np.random.default_rng(5), cfg) for _ in range(100)]
    draws_b = [draw_augment(np.random.default_rng(5), cfg) for _ in range(100)]
    draws_equal = draws_a == draws_b

    short = TrainConfig(mode="plain", total_iters=12, batch_size=2, seed=42,
                        val_every=10 ** 9, checkpoint_every=10 ** 9)
    small = ButterflyConfig(base_filters=4, bottleneck_channels=16)
    r1 = train(desk_corpus["prepared"], tmp_path / "t1", short, small)
    r2 = train(desk_corpus["prepared"], tmp_path / "t2", short, small)
    traces_equal = r1["rows"] == r2["rows"]

    _report(10, "identical seeds reproduce phantom datasets, augmentation draws "
                "and loss traces bit-exactly",
            phantoms_equal and draws_equal and traces_equal)
