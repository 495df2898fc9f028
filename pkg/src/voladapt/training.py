"""Staged training protocol: autoencoder pretraining, segmenter
pretraining, classifier pretraining, and the combined adversarial stage
with the ramped adversarial weight and parallel classifier updates."""

from __future__ import annotations

import contextlib
import csv
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses, nets
from .autodiff import Optimizer, Tensor
from .losses import LossWeights


class PrerequisiteError(RuntimeError):
    """A stage was started without its required checkpoints."""


class NumericError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass
class OptimSpec:
    kind: str
    lr: float
    weight_reg: float = 0.0
    beta: float = 0.9
    beta1: float = 0.99
    beta2: float = 0.999

    def build(self, lr_decay):
        return Optimizer(self.kind, self.lr, self.weight_reg, beta=self.beta,
                         beta1=self.beta1, beta2=self.beta2, epoch_decay=lr_decay)


@dataclass
class TrainStage:
    id: str
    optim: OptimSpec
    epochs: int
    batch_size: int = 4
    lr_decay: float = 0.99
    cls_optim: OptimSpec = None   # combined stage trains the classifier in parallel


def default_stages():
    """The four-stage schedule with its published hyperparameters."""
    return {
        "AE": TrainStage("AE", OptimSpec("momentum", 5e-4, 0.1, beta=0.9), 100),
        "SEG": TrainStage("SEG", OptimSpec("adam", 1e-5, 5e-4, beta1=0.99, beta2=0.999), 50),
        "CLS": TrainStage("CLS", OptimSpec("sgd", 5e-5, 1e-5), 15),
        "COMBINED": TrainStage("COMBINED", OptimSpec("momentum", 1e-5, 5e-4, beta=0.99), 100,
                               cls_optim=OptimSpec("sgd", 5e-5, 1e-5)),
    }


@dataclass
class Preset:
    name: str
    weights: LossWeights
    stages: tuple


def preset(name):
    """Experiment presets: plain segmenter, shape prior (L2 / angular),
    and shape prior + adversarial."""
    key = name.lower()
    table = {
        "vnet": Preset("vnet", LossWeights(0.0, 0.0, distance="l2"), ("SEG",)),
        "c1": Preset("c1", LossWeights(0.001, 0.0, distance="l2"), ("AE", "SEG", "COMBINED")),
        "c2": Preset("c2", LossWeights(0.001, 0.0, distance="acd"), ("AE", "SEG", "COMBINED")),
        "c3": Preset("c3", LossWeights(0.001, 0.001, distance="acd"),
                     ("AE", "SEG", "CLS", "COMBINED")),
    }
    if key not in table:
        raise ValueError(f"unknown preset {name!r} (expected vnet|c1|c2|c3)")
    return table[key]


def lambda_schedule(e, e_adv, alpha, lambda_adv_max):
    """Adversarial weight: 0 before e_adv, then a linear ramp clamped at
    lambda_adv_max."""
    if e < 0:
        raise ValueError("epoch must be non-negative")
    if e < e_adv:
        return 0.0
    return min((e - e_adv + 1) * alpha, 1.0) * lambda_adv_max


def freeze(params):
    params.frozen = True


def unfreeze(params):
    params.frozen = False


@contextlib.contextmanager
def no_grad(*param_sets):
    saved = []
    for ps in param_sets:
        for t in ps.tensors():
            saved.append((t, t.requires_grad))
            t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


# ---------------------------------------------------------------------------
# data containers


@dataclass
class Case:
    case_id: str
    domain: str
    image: np.ndarray = None      # float32 (S,S,S)
    label: np.ndarray = None      # uint8 (S,S,S)
    spacing: tuple = (1.0, 1.0, 1.0)


@dataclass
class DataBundle:
    source: str
    target: str
    cases: dict = field(default_factory=dict)   # (domain, split) -> [Case]

    def get(self, domain, split):
        return self.cases.get((domain, split), [])

    def add(self, case, split):
        self.cases.setdefault((case.domain, split), []).append(case)


def stage_data_sources(stage_id, source, target):
    """Which (domain, kind) pairs a stage is allowed to read.

    Target-domain ground truth never appears: adaptation is unsupervised.
    """
    s, t = source, target
    table = {
        "AE": [(s, "label")],
        "SEG": [(s, "image"), (s, "label")],
        "CLS": [(s, "image"), (t, "image")],
        "COMBINED": [(s, "image"), (s, "label"), (t, "image")],
    }
    if stage_id not in table:
        raise ValueError(f"unknown stage {stage_id!r}")
    return table[stage_id]


def training_file_listing(entries, stage_id, source, target):
    """File paths a training stage reads, from a dataset manifest."""
    allowed = set(stage_data_sources(stage_id, source, target))
    paths = []
    for e in entries:
        if e.split != "train":
            continue
        if (e.domain, "image") in allowed:
            paths.append(e.volume_path)
        if (e.domain, "label") in allowed:
            paths.append(e.label_path)
    return paths


# ---------------------------------------------------------------------------
# batch plumbing


def _stack_images(cases):
    return Tensor(np.stack([c.image for c in cases])[:, None, :, :, :])


def _stack_labels(cases):
    return Tensor(np.stack([c.label for c in cases]).astype(np.float32)[:, None, :, :, :])


def epoch_permutation(n, rng):
    return rng.permutation(n)


def _batches(cases, batch_size, rng):
    order = epoch_permutation(len(cases), rng)
    for i in range(0, len(order), batch_size):
        yield [cases[j] for j in order[i:i + batch_size]]


def _mixed_batches(src, tgt, per_side, rng):
    """Balanced source/target batches (labels: 0 source, 1 target)."""
    so = epoch_permutation(len(src), rng)
    to = epoch_permutation(len(tgt), rng)
    n = min(len(so), len(to))
    for i in range(0, n - per_side + 1, per_side):
        yield ([src[j] for j in so[i:i + per_side]],
               [tgt[j] for j in to[i:i + per_side]])


def _check_finite(value, stage_id, epoch, batch_idx):
    if not np.isfinite(value):
        raise NumericError(
            f"non-finite loss in stage {stage_id}, epoch {epoch}, batch {batch_idx}")


def classifier_accuracy(models, src_cases, tgt_cases):
    """Domain accuracy of the classifier on a held-out mixed set."""
    correct = 0
    total = 0
    with no_grad(models.seg, models.cls):
        for cases, label in ((src_cases, 0.0), (tgt_cases, 1.0)):
            for c in cases:
                _, taps = nets.segment(models.seg, models.seg_cfg,
                                       Tensor(c.image[None, None]))
                pred = nets.classify_domain(models.cls, models.cls_cfg,
                                            models.seg_cfg, taps)
                correct += int((float(pred.data.ravel()[0]) >= 0.5) == (label == 1.0))
                total += 1
    return correct / total if total else float("nan")


# ---------------------------------------------------------------------------
# model bundle and stage runner


@dataclass
class Models:
    seg_cfg: nets.VNetConfig
    ae_cfg: nets.AutoencoderConfig
    cls_cfg: nets.ClassifierConfig
    seg: object = None
    ae: object = None
    cls: object = None


@dataclass
class RunState:
    stage_id: str
    seed: int
    epoch: int = 0
    lambda_adv: float = 0.0
    history: list = field(default_factory=list)      # per-epoch loss means
    cls_accuracy: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def write_loss_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "L_seg", "L_enc", "L_adv", "lambda_adv", "lr"])
            for row in self.history:
                wr.writerow([row["epoch"], repr(row["L_seg"]), repr(row["L_enc"]),
                             repr(row["L_adv"]), repr(row["lambda_adv"]), repr(row["lr"])])


def _require(cond, msg):
    if not cond:
        raise PrerequisiteError(msg)


def run_stage(stage, models, data, seed, weights=None, run_dir=None,
              checkpoint_every=10, log=None):
    """Execute one training stage and return its RunState.

    ``weights`` (LossWeights) is required for COMBINED; the autoencoder
    must already be frozen whenever the shape term is active.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF,
                                                        zlib.crc32(stage.id.encode())]))
    state = RunState(stage.id, seed)
    runner = {
        "AE": _run_ae,
        "SEG": _run_seg,
        "CLS": _run_cls,
        "COMBINED": _run_combined,
    }.get(stage.id)
    if runner is None:
        raise ValueError(f"unknown stage {stage.id!r}")
    runner(stage, models, data, rng, state, weights, run_dir, checkpoint_every, log)
    if run_dir is not None:
        state.write_loss_csv(run_dir / f"loss_{stage.id}.csv")
        _save_stage_checkpoint(models, stage.id, run_dir, state)
    return state


def _save_stage_checkpoint(models, stage_id, run_dir, state, suffix=""):
    for net_name in ("seg", "ae", "cls"):
        params = getattr(models, net_name)
        if params is not None:
            path = run_dir / f"{net_name}_{stage_id}{suffix}.ckpt"
            params.save(path)
            state.checkpoints.append(str(path))


def _record(state, epoch, l_seg, l_enc, l_adv, lam, lr, log):
    row = {"epoch": epoch, "L_seg": l_seg, "L_enc": l_enc, "L_adv": l_adv,
           "lambda_adv": lam, "lr": lr}
    state.history.append(row)
    state.epoch = epoch
    if log:
        log(f"[{state.stage_id}] epoch {epoch}: L_seg={l_seg:.4f} "
            f"L_enc={l_enc:.4f} L_adv={l_adv:.4f} lam={lam:.2e} lr={lr:.2e}")


def _run_ae(stage, models, data, rng, state, weights, run_dir, ck, log):
    _require(models.ae is not None, "AE stage needs a built autoencoder")
    cases = data.get(data.source, "train")
    _require(len(cases) > 0, "AE stage needs source training labels")
    opt = stage.optim.build(stage.lr_decay)
    for e in range(stage.epochs):
        vals = []
        for bi, batch in enumerate(_batches(cases, stage.batch_size, rng)):
            y = _stack_labels(batch)
            recon = nets.autoencode(models.ae, models.ae_cfg, y)
            loss = losses.binary_cross_entropy(recon, y)
            _check_finite(loss.item(), "AE", e, bi)
            models.ae.zero_grad()
            loss.backward()
            opt.step(models.ae)
            vals.append(loss.item())
        opt.decay_epoch()
        _record(state, e, 0.0, float(np.mean(vals)), 0.0, 0.0, opt.lr, log)


def _run_seg(stage, models, data, rng, state, weights, run_dir, ck, log):
    _require(models.seg is not None, "SEG stage needs a built segmenter")
    cases = data.get(data.source, "train")
    _require(len(cases) > 0, "SEG stage needs labeled source training data")
    opt = stage.optim.build(stage.lr_decay)
    for e in range(stage.epochs):
        vals = []
        for bi, batch in enumerate(_batches(cases, stage.batch_size, rng)):
            x, y = _stack_images(batch), _stack_labels(batch)
            probs, _ = nets.segment(models.seg, models.seg_cfg, x)
            loss = losses.dice_loss(probs, y)
            _check_finite(loss.item(), "SEG", e, bi)
            models.seg.zero_grad()
            loss.backward()
            opt.step(models.seg)
            vals.append(loss.item())
        opt.decay_epoch()
        _record(state, e, float(np.mean(vals)), 0.0, 0.0, 0.0, opt.lr, log)


def _classifier_step(models, src, tgt, opt, stage_id, e, bi):
    x = Tensor(np.stack([c.image for c in src + tgt])[:, None])
    d = Tensor(np.array([[0.0]] * len(src) + [[1.0]] * len(tgt), dtype=np.float32))
    with no_grad(models.seg):
        _, taps = nets.segment(models.seg, models.seg_cfg, x)
    pred = nets.classify_domain(models.cls, models.cls_cfg, models.seg_cfg, taps)
    loss = losses.adversarial_loss(pred, d)
    _check_finite(loss.item(), stage_id, e, bi)
    models.cls.zero_grad()
    loss.backward()
    opt.step(models.cls)
    return loss.item()


def _run_cls(stage, models, data, rng, state, weights, run_dir, ck, log):
    _require(models.seg is not None, "CLS stage needs a (pre-trained) segmenter")
    _require(models.cls is not None, "CLS stage needs a built classifier")
    src = data.get(data.source, "train")
    tgt = data.get(data.target, "train")
    _require(src and tgt, "CLS stage needs training images from both domains")
    per_side = stage.batch_size // 2
    opt = stage.optim.build(stage.lr_decay)
    for e in range(stage.epochs):
        vals = []
        for bi, (bs, bt) in enumerate(_mixed_batches(src, tgt, per_side, rng)):
            vals.append(_classifier_step(models, bs, bt, opt, "CLS", e, bi))
        opt.decay_epoch()
        _record(state, e, 0.0, 0.0, float(np.mean(vals)), 0.0, opt.lr, log)


def _run_combined(stage, models, data, rng, state, weights, run_dir, ck, log):
    _require(weights is not None, "COMBINED stage needs LossWeights")
    _require(models.seg is not None, "COMBINED stage needs a pre-trained segmenter")
    use_enc = weights.lambda_enc > 0
    use_adv = weights.lambda_adv_max > 0
    if use_enc:
        _require(models.ae is not None, "COMBINED with shape prior needs the autoencoder")
        _require(models.ae.frozen, "autoencoder must be frozen before combined training")
    if use_adv:
        _require(models.cls is not None, "COMBINED with adversarial loss needs the classifier")
    src = data.get(data.source, "train")
    tgt = data.get(data.target, "train")
    _require(len(src) > 0, "COMBINED stage needs labeled source training data")
    if use_adv:
        _require(len(tgt) > 0, "adversarial training needs target images")
    seg_opt = stage.optim.build(stage.lr_decay)
    cls_opt = stage.cls_optim.build(stage.lr_decay) if (use_adv and stage.cls_optim) else None
    per_side = stage.batch_size // 2
    src_val = data.get(data.source, "val")
    tgt_val = data.get(data.target, "val")

    for e in range(stage.epochs):
        lam = lambda_schedule(e, weights.e_adv, weights.alpha,
                              weights.lambda_adv_max) if use_adv else 0.0
        state.lambda_adv = lam
        seg_vals, enc_vals, adv_vals = [], [], []
        batches = (_mixed_batches(src, tgt, per_side, rng) if use_adv
                   else _batches(src, stage.batch_size, rng))
        for bi, batch in enumerate(batches):
            if use_adv:
                bs, bt = batch
                x = Tensor(np.stack([c.image for c in bs + bt])[:, None])
                ns = len(bs)
            else:
                bs, bt = batch, []
                x = _stack_images(bs)
                ns = len(bs)
            y = _stack_labels(bs)
            probs, taps = nets.segment(models.seg, models.seg_cfg, x)
            probs_src = ad_slice(probs, 0, ns) if len(bt) else probs
            l_seg = losses.dice_loss(probs_src, y)
            l_enc = (losses.shape_loss(
                lambda p, t: nets.encode(p, models.ae_cfg, t),
                models.ae, y, probs_src, weights.distance)
                if use_enc else _zero_like(l_seg))
            if use_adv:
                d = Tensor(np.array([[0.0]] * ns + [[1.0]] * len(bt), dtype=np.float32))
                with no_grad(models.cls):
                    d_hat = nets.classify_domain(models.cls, models.cls_cfg,
                                                 models.seg_cfg, taps)
                l_adv = losses.adversarial_loss(d_hat, d)
            else:
                l_adv = _zero_like(l_seg)
            total = losses.combined_loss(l_seg, l_enc, l_adv,
                                         weights.lambda_enc if use_enc else 0.0, lam)
            _check_finite(total.item(), "COMBINED", e, bi)
            models.seg.zero_grad()
            total.backward()
            seg_opt.step(models.seg)
            models.seg.zero_grad()
            seg_vals.append(l_seg.item())
            enc_vals.append(l_enc.item())
            adv_vals.append(l_adv.item())
            # classifier keeps learning in parallel on a fresh mixed batch
            if cls_opt is not None:
                fresh = next(_mixed_batches(src, tgt, per_side, rng))
                _classifier_step(models, fresh[0], fresh[1], cls_opt, "COMBINED", e, bi)
        seg_opt.decay_epoch()
        if cls_opt is not None:
            cls_opt.decay_epoch()
        _record(state, e, float(np.mean(seg_vals)), float(np.mean(enc_vals)),
                float(np.mean(adv_vals)), lam, seg_opt.lr, log)
        if use_adv and src_val and tgt_val:
            state.cls_accuracy.append(classifier_accuracy(models, src_val, tgt_val))
        if run_dir is not None and (e + 1) % ck == 0:
            _save_stage_checkpoint(models, stage.id, run_dir, state, suffix=f"_e{e + 1}")


def _zero_like(t):
    return Tensor(np.asarray(0.0, dtype=t.dtype))


def ad_slice(t, start, stop):
    from . import autodiff
    return autodiff.batch_slice(t, start, stop)


# ---------------------------------------------------------------------------
# full pipeline


def build_models(seg_cfg, ae_cfg, cls_cfg, seed, which=("seg", "ae", "cls")):
    models = Models(seg_cfg, ae_cfg, cls_cfg)
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(3)
    if "seg" in which:
        models.seg = nets.build_segnet(seg_cfg, int(seeds[0]))
    if "ae" in which:
        models.ae = nets.build_autoencoder(ae_cfg, int(seeds[1]))
    if "cls" in which:
        models.cls = nets.build_classifier(cls_cfg, seg_cfg, int(seeds[2]))
    return models


def run_pipeline(preset_name, models, data, seed, run_dir=None,
                 stages=None, stage_overrides=None, base_weights=None, log=None):
    """Run the preset's stages in order AE -> SEG -> CLS -> COMBINED.

    ``stage_overrides`` maps stage id to a replacement TrainStage (e.g.
    reduced epochs for desk-scale runs); ``stages`` restricts execution to
    a subset, preserving order. ``base_weights`` supplies the ramp knobs
    (alpha, e_adv); the lambda values and distance stay preset-pinned.
    """
    p = preset(preset_name)
    if base_weights is not None:
        p = replace(p, weights=replace(base_weights,
                                       lambda_enc=p.weights.lambda_enc,
                                       lambda_adv_max=p.weights.lambda_adv_max,
                                       distance=p.weights.distance))
    table = default_stages()
    if stage_overrides:
        table.update(stage_overrides)
    states = {}
    for sid in p.stages:
        if stages is not None and sid not in stages:
            continue
        if sid == "COMBINED" and p.weights.lambda_enc > 0 and models.ae is not None:
            freeze(models.ae)
        states[sid] = run_stage(table[sid], models, data, seed,
                                weights=p.weights, run_dir=run_dir, log=log)
        if sid == "AE":
            freeze(models.ae)
    return states
