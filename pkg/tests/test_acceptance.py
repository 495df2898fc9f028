"""End-to-end acceptance gate.

Eight numbered criteria, each printed as a single PASS/FAIL line (run with
``pytest -s`` to see them as they complete). Criteria 5 and 6 train real
models and dominate the runtime; the whole file is sized for a desktop CPU.
"""

import copy
import time

import numpy as np
import pytest
import scipy.stats

from voladapt import autodiff as ad, cli, losses, metrics, nets, phantom, training
from voladapt.autodiff import Tensor
from voladapt.losses import LossWeights
from voladapt.metrics import BinaryMask
from voladapt.training import (Case, DataBundle, OptimSpec, TrainStage,
                               build_models, classifier_accuracy, freeze,
                               run_stage)


def _report(num, name, ok, extra=""):
    status = "PASS" if ok else "FAIL"
    print(f"[criterion {num}] {status}: {name}{' - ' + extra if extra else ''}")
    return ok


# ---------------------------------------------------------------------------
# criterion 1: gradient suite


class TestCriterion1Gradients:
    def test_gradient_suite(self):
        t0 = time.time()
        rng = np.random.default_rng(42)
        worst = 0.0

        def check(fn, args):
            nonlocal worst
            err = ad.grad_check(fn, args)
            worst = max(worst, err)
            assert err <= 1e-5, f"rel err {err}"

        for trial in range(5):
            x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)), dtype=np.float64)
            w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.5, dtype=np.float64)
            b = Tensor(rng.standard_normal(3), dtype=np.float64)
            check(lambda x, w, b: ad.tsum(ad.square(
                ad.conv3d(x, w, b, stride=1, padding=1))), [x, w, b])

            xt = Tensor(rng.standard_normal((1, 2, 2, 2, 2)), dtype=np.float64)
            wt = Tensor(rng.standard_normal((2, 3, 2, 2, 2)) * 0.5, dtype=np.float64)
            bt = Tensor(rng.standard_normal(3), dtype=np.float64)
            check(lambda x, w, b: ad.tsum(ad.square(
                ad.conv3d_transpose(x, w, b, stride=2))), [xt, wt, bt])

            xd = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
            wd = Tensor(rng.standard_normal((4, 5)), dtype=np.float64)
            bd = Tensor(rng.standard_normal(5), dtype=np.float64)
            check(lambda x, w, b: ad.tsum(ad.square(ad.dense(x, w, b))), [xd, wd, bd])

            xp = Tensor(rng.standard_normal((2, 3, 5)), dtype=np.float64)
            sp = Tensor(np.abs(rng.standard_normal(3)) + 0.1, dtype=np.float64)
            check(lambda x, s: ad.tsum(ad.square(ad.prelu(x, s))), [xp, sp])

            xs = Tensor(rng.standard_normal((2, 6)), dtype=np.float64)
            check(lambda x: ad.tsum(ad.square(ad.sigmoid(x))), [xs])
            check(lambda x: ad.tsum(ad.square(ad.batch_slice(x, 0, 1))), [xs])

            pred = Tensor(rng.uniform(0.05, 0.95, (1, 1, 4, 4, 4)), dtype=np.float64)
            targ = Tensor((rng.random((1, 1, 4, 4, 4)) > 0.5).astype(np.float64))
            check(lambda p: losses.dice_loss(p, targ), [pred])

            pb = Tensor(rng.uniform(0.1, 0.9, (4, 1)), dtype=np.float64)
            db = Tensor((rng.random((4, 1)) > 0.5).astype(np.float64))
            check(lambda p: losses.binary_cross_entropy(p, db), [pb])

            p1 = Tensor(rng.standard_normal(8), dtype=np.float64)
            q1 = Tensor(rng.standard_normal(8), dtype=np.float64)
            check(lambda p, q: losses.latent_distance(p, q, "l2"), [p1, q1])
            check(lambda p, q: losses.latent_distance(p, q, "acd"), [p1, q1])

        elapsed = time.time() - t0
        ok = worst <= 1e-5 and elapsed <= 120
        assert _report(1, "gradient suite", ok,
                       f"max rel err {worst:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 2: loss identities


class TestCriterion2LossIdentities:
    def test_loss_identities(self):
        y = Tensor((np.random.default_rng(0).random((1, 1, 6, 6, 6)) > 0.5)
                   .astype(np.float64))
        ok = losses.dice_loss(y, y).item() <= 1e-5

        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[2:6, 2:6, 2:6] = True
        b[2:6, 2:6, 4:8] = True
        ok &= metrics.dice(BinaryMask(a), BinaryMask(b)) == 0.5

        p = Tensor(np.array([0.3, -1.2, 2.0], dtype=np.float64))
        ok &= abs(losses.latent_distance(p, p, "acd").item()) <= 1e-12
        q = Tensor(-p.data)
        ok &= abs(losses.latent_distance(p, q, "acd").item() - 2.0) <= 1e-12

        l_seg = Tensor(np.asarray(0.40625, dtype=np.float32))
        l_other = Tensor(np.asarray(0.7, dtype=np.float32))
        out = losses.combined_loss(l_seg, l_other, l_other, 0.0, 0.0)
        ok &= out.data.tobytes() == l_seg.data.tobytes()

        assert _report(2, "loss identities", ok)


# ---------------------------------------------------------------------------
# criterion 3: adversarial weight schedule


class TestCriterion3Schedule:
    def test_schedule(self):
        sched = training.lambda_schedule
        ok = all(sched(e, 10, 0.1, 0.001) == 0.0 for e in range(10))
        ok &= abs(sched(10, 10, 0.1, 0.001) - 1e-4) <= 1e-18
        for e in range(19, 40):
            ok &= abs(sched(e, 10, 0.1, 0.001) - 1e-3) <= 1e-18
        # direct evaluation of the ramp formula on the interior
        for e in range(10, 19):
            expect = min((e - 10 + 1) * 0.1, 1.0) * 0.001
            ok &= sched(e, 10, 0.1, 0.001) == expect
        assert _report(3, "lambda_adv schedule", ok)


# ---------------------------------------------------------------------------
# criterion 4: metric oracles


def _brute_surface(m):
    pts = []
    shape = m.shape
    for z, y, x in zip(*np.nonzero(m)):
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                           (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            n = (z + dz, y + dy, x + dx)
            if not all(0 <= c < s for c, s in zip(n, shape)) or not m[n]:
                pts.append((z, y, x))
                break
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def _brute_distances(ma, mb, spacing):
    sp = np.asarray(spacing)
    pa = _brute_surface(ma) * sp
    pb = _brute_surface(mb) * sp
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    d_ab = d.min(axis=1)
    d_ba = d.min(axis=0)
    return 0.5 * (d_ab.mean() + d_ba.mean()), max(d_ab.max(), d_ba.max())


def _flood_components(m):
    import collections
    labels = np.zeros(m.shape, dtype=int)
    nxt = 0
    for start in zip(*np.nonzero(m)):
        if labels[start]:
            continue
        nxt += 1
        queue = collections.deque([start])
        labels[start] = nxt
        while queue:
            z, y, x = queue.popleft()
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                               (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                n = (z + dz, y + dy, x + dx)
                if all(0 <= c < s for c, s in zip(n, m.shape)) \
                        and m[n] and not labels[n]:
                    labels[n] = nxt
                    queue.append(n)
    return labels


class TestCriterion4MetricOracles:
    def test_metric_oracles(self):
        t0 = time.time()
        rng = np.random.default_rng(7)
        checked = 0
        ok = True
        while checked < 200:
            a = rng.random((16, 16, 16)) < rng.uniform(0.05, 0.4)
            b = rng.random((16, 16, 16)) < rng.uniform(0.05, 0.4)
            sp = tuple(rng.uniform(0.5, 1.5, 3))

            labels = _flood_components(a)
            if labels.max() > 0:
                sizes = np.bincount(labels.ravel())[1:]
                best = sizes.max()
                cands = [i + 1 for i, s in enumerate(sizes) if s == best]
                keep = min(cands,
                           key=lambda lab: int(np.argmax(labels.ravel() == lab)))
                got = metrics.largest_component(BinaryMask(a, sp))
                ok &= np.array_equal(got.data, labels == keep)

            if a.any() and b.any():
                got = metrics.surface_distances(BinaryMask(a, sp), BinaryMask(b, sp))
                want = _brute_distances(a, b, sp)
                ok &= got[0] == want[0] and got[1] == want[1]
            checked += 1
        assert ok, "mask metric mismatch vs brute-force oracle"

        max_dp = 0.0
        for _ in range(50):
            n = int(rng.integers(3, 30))
            x = rng.normal(0.7, 0.15, n)
            y = x + rng.normal(0.03, 0.05, n)
            t, p = metrics.paired_ttest(x, y)
            ref = scipy.stats.ttest_rel(x, y)
            max_dp = max(max_dp, abs(p - ref.pvalue))
        ok &= max_dp <= 1e-6
        elapsed = time.time() - t0
        ok &= elapsed <= 300
        assert _report(4, "metric oracles", ok,
                       f"200 mask pairs exact, |dp| <= {max_dp:.1e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# shared phantom data for the training criteria


def _phantom_bundle(size, data_seed, counts):
    """Preprocessed two-domain phantom bundle; counts: domain -> {split: n}."""
    doms = {d.name: d for d in phantom.scaled_domains(size)}
    data = DataBundle("A", "B")
    for name, split_counts in counts.items():
        for split, n in split_counts.items():
            for i in range(n):
                cid = f"{name}_{split}_{i:03d}"
                vol, lab = phantom.sample_case(doms[name],
                                               phantom.case_seed(data_seed, cid))
                v = phantom.preprocess(vol, size)
                l = phantom.preprocess(lab, size, interp="nearest")
                data.add(Case(cid, name, v.data, l.data, l.spacing_mm), split)
    return data


def _recon_dice(models, cases):
    vals = []
    with training.no_grad(models.ae):
        for c in cases:
            y = Tensor(c.label.astype(np.float32)[None, None])
            recon = nets.autoencode(models.ae, models.ae_cfg, y)
            vals.append(metrics.dice(BinaryMask(recon.data[0, 0] >= 0.5),
                                     BinaryMask(c.label > 0)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# criterion 5: staged-training contracts


class TestCriterion5StagedContracts:
    def test_staged_training_contracts(self):
        t0 = time.time()
        # autoencoder reconstruction quality on its own 32^3 training masks
        data32 = _phantom_bundle(32, 2024, {"A": {"train": 8, "val": 2},
                                            "B": {"train": 4, "val": 2}})
        seg_cfg = nets.VNetConfig(input_size=32, levels=3, base_channels=8)
        ae_cfg = nets.AutoencoderConfig(input_size=32, latent_dim=128, base_channels=16)
        models = build_models(seg_cfg, ae_cfg, nets.ClassifierConfig(), 0)
        run_stage(TrainStage("AE", OptimSpec("adam", 3e-3, 0.0, beta1=0.9, beta2=0.999),
                             200, batch_size=4, lr_decay=1.0), models, data32, 0)
        recon = _recon_dice(models, data32.get("A", "train"))
        ok = recon >= 0.95

        # frozen autoencoder checksum must survive a COMBINED stage with
        # both the shape prior and the adversarial term active
        freeze(models.ae)
        ck_before = models.ae.checksum()
        comb = TrainStage("COMBINED", OptimSpec("adam", 1e-4, 0.0, beta1=0.9, beta2=0.999),
                          3, batch_size=4, lr_decay=1.0,
                          cls_optim=OptimSpec("sgd", 5e-5, 0.0))
        run_stage(comb, models, data32, 0,
                  weights=LossWeights(0.001, 0.001, alpha=0.5, e_adv=1, distance="acd"))
        stable = models.ae.checksum() == ck_before
        ok &= stable

        # the domain classifier must separate phantom domains A and B at 16^3
        data16 = _phantom_bundle(16, 55, {"A": {"train": 8, "val": 8},
                                          "B": {"train": 8, "val": 8}})
        seg16 = nets.VNetConfig(input_size=16, levels=2, base_channels=4)
        ae16 = nets.AutoencoderConfig(input_size=16, latent_dim=32, base_channels=4)
        m16 = build_models(seg16, ae16, nets.ClassifierConfig(), 3)
        run_stage(TrainStage("CLS", OptimSpec("sgd", 2e-3, 0.0), 40,
                             batch_size=4, lr_decay=1.0), m16, data16, 3)
        acc = classifier_accuracy(m16, data16.get("A", "val"), data16.get("B", "val"))
        ok &= acc >= 0.80

        assert _report(5, "staged-training contracts", ok,
                       f"AE recon dice {recon:.3f}, theta_ae "
                       f"{'stable' if stable else 'CHANGED'}, CLS acc {acc:.2f}, "
                       f"{time.time() - t0:.0f}s")


# ---------------------------------------------------------------------------
# criterion 6: desk-scale adaptation analog


class TestCriterion6AdaptationAnalog:
    SEEDS = (11, 12, 13)
    SEG_STAGE = TrainStage("SEG", OptimSpec("adam", 3e-4, 1e-4, beta1=0.9, beta2=0.999),
                           90, batch_size=4, lr_decay=1.0)
    AE_STAGE = TrainStage("AE", OptimSpec("adam", 3e-3, 0.0, beta1=0.9, beta2=0.999),
                          200, batch_size=4, lr_decay=1.0)
    CLS_STAGE = TrainStage("CLS", OptimSpec("sgd", 5e-4, 0.0), 4,
                           batch_size=4, lr_decay=1.0)
    COMB_STAGE = TrainStage("COMBINED", OptimSpec("adam", 2e-4, 1e-4,
                                                  beta1=0.9, beta2=0.999),
                            60, batch_size=4, lr_decay=1.0,
                            cls_optim=OptimSpec("sgd", 5e-5, 0.0))
    E_ADV = 10
    PRESETS = {
        "c1": LossWeights(0.001, 0.0, distance="l2"),
        "c2": LossWeights(0.001, 0.0, distance="acd"),
        "c3": LossWeights(0.001, 0.001, alpha=0.2, e_adv=E_ADV, distance="acd"),
    }

    @staticmethod
    def _target_dice(models, data):
        val = data.get("A", "val")
        probs = [cli.predict_probs(models, c.image) for c in val]
        refs = [BinaryMask(c.label > 0, c.spacing) for c in val]
        thr = metrics.select_threshold(probs, refs)
        ds = [metrics.evaluate_case(cli.predict_probs(models, c.image),
                                    BinaryMask(c.label > 0, c.spacing), thr)[0]
              for c in data.get("B", "test")]
        return float(np.mean(ds))

    def test_adaptation_analog(self):
        t0 = time.time()
        data = _phantom_bundle(32, 2024, {
            "A": {"train": 8, "val": 8, "test": 8},
            "B": {"train": 8, "val": 8, "test": 8},
        })
        seg_cfg = nets.VNetConfig(input_size=32, levels=3, base_channels=8)
        ae_cfg = nets.AutoencoderConfig(input_size=32, latent_dim=128, base_channels=16)
        dice = {name: [] for name in ("vnet", "c1", "c2", "c3")}
        drops = []

        for seed in self.SEEDS:
            models = build_models(seg_cfg, ae_cfg, nets.ClassifierConfig(), seed)
            run_stage(self.SEG_STAGE, models, data, seed)
            dice["vnet"].append(self._target_dice(models, data))
            base_seg = copy.deepcopy(models.seg)

            run_stage(self.AE_STAGE, models, data, seed)
            freeze(models.ae)
            run_stage(self.CLS_STAGE, models, data, seed)
            base_cls = copy.deepcopy(models.cls)

            for name, weights in self.PRESETS.items():
                models.seg = copy.deepcopy(base_seg)
                models.cls = copy.deepcopy(base_cls)
                st = run_stage(self.COMB_STAGE, models, data, seed, weights=weights)
                dice[name].append(self._target_dice(models, data))
                if name == "c3":
                    acc = st.cls_accuracy
                    drops.append(max(acc[:self.E_ADV]) - min(acc[self.E_ADV:]))

        means = {k: float(np.mean(v)) for k, v in dice.items()}
        elapsed = time.time() - t0
        gap = means["c3"] - means["vnet"]
        min_drop = min(drops)
        ok = gap >= 0.03
        ok &= means["c1"] > means["vnet"] and means["c2"] > means["vnet"]
        ok &= min_drop >= 0.10
        ok &= elapsed <= 3600
        detail = (f"target dice vnet {means['vnet']:.3f} c1 {means['c1']:.3f} "
                  f"c2 {means['c2']:.3f} c3 {means['c3']:.3f} (gap {gap:+.3f}), "
                  f"min cls-acc drop {min_drop:.2f}, {elapsed:.0f}s")
        assert _report(6, "adaptation analog over 3 seeds", ok, detail)


# ---------------------------------------------------------------------------
# criterion 7: bitwise determinism of the CLI pipeline


class TestCriterion7Determinism:
    CFG = {
        "seed": 777,
        "deterministic": True,
        "threads": 1,
        "target_size": 16,
        "preset": "c3",
        "segnet": {"input_size": 16, "levels": 2, "base_channels": 2},
        "autoencoder": {"input_size": 16, "latent_dim": 16, "base_channels": 2},
        "loss_weights": {"e_adv": 1, "alpha": 0.5},
        "domains": [
            {"name": "A", "azimuth_deg": [85.0, 2.0], "elevation_deg": [80.0, 2.0],
             "resolution_mm": [0.95, 0.05], "split": [4, 2, 2], "native_size": 16},
            {"name": "B", "azimuth_deg": [60.0, 5.0], "elevation_deg": [60.0, 5.0],
             "resolution_mm": [0.95, 0.05], "split": [4, 2, 2], "native_size": 16,
             "gamma": 1.5, "contrast": 0.7},
        ],
        "stages": {
            "AE": {"epochs": 2, "batch_size": 2},
            "SEG": {"epochs": 2, "batch_size": 2},
            "CLS": {"epochs": 2, "batch_size": 2},
            "COMBINED": {"epochs": 3, "batch_size": 2},
        },
    }

    def _run_once(self, root):
        import yaml
        root.mkdir(parents=True, exist_ok=True)
        cfg = dict(self.CFG)
        cfg["data_dir"] = str(root / "data")
        cfg["run_dir"] = str(root / "run")
        cfg_path = root / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump(cfg))
        assert cli.main(["gen", "--config", str(cfg_path)]) == 0
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        assert cli.main(["eval", "--run-dir", str(root / "run")]) == 0
        out = {}
        for name in ("loss_AE.csv", "loss_SEG.csv", "loss_CLS.csv",
                     "loss_COMBINED.csv", "cases.csv", "aggregate.csv"):
            out[name] = (root / "run" / name).read_bytes()
        return out

    def test_two_runs_bitwise_identical(self, tmp_path):
        r1 = self._run_once(tmp_path / "r1")
        r2 = self._run_once(tmp_path / "r2")
        same = {k: r1[k] == r2[k] for k in r1}
        ok = all(same.values())
        assert _report(7, "gen -> train c3 -> eval bitwise determinism", ok,
                       "files: " + ", ".join(k for k in r1)
                       if ok else "mismatch: " + ", ".join(k for k, v in same.items() if not v))


# ---------------------------------------------------------------------------
# criterion 8: pipeline identity (cheap, before the training criteria)


class TestCriterion8PipelineIdentity:
    def test_identity(self):
        rng = np.random.default_rng(3)
        prob_cases = {}
        for dom in ("A", "B"):
            cases = []
            for i in range(5):
                m = np.zeros((12, 12, 12), dtype=bool)
                z, y, x = rng.integers(2, 7, 3)
                m[z:z + 4, y:y + 4, x:x + 4] = True
                ref = BinaryMask(m, tuple(rng.uniform(0.5, 1.5, 3)))
                cases.append((f"{dom}_{i}", m.astype(np.float64), ref))
            prob_cases[dom] = cases
        report = metrics.evaluate(prob_cases, 0.5, "A", "c3")
        ok = all(r.dice == 1.0 and r.msd_mm == 0.0 and r.hd_mm == 0.0
                 and not r.flag for r in report.rows)
        assert _report(8, "pipeline identity DC=1 MSD=0 HD=0", ok,
                       f"{len(report.rows)} cases")
