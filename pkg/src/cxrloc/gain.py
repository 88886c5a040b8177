"""Attention-guided classifier: Grad-CAM attention on the final conv layer,
soft masking, and the three-term composite loss

    total = lambda * classification + alpha * attention-mining + omega * pixel

For a global-avg-pool + dense head the Grad-CAM channel weights have a
closed first-order form, so the attention map inside the objective is an
ordinary differentiable expression; only the per-sample sigmoid' scalar and
the soft masks T are frozen per step, keeping training first-order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .atlas import NormalizedBox, rasterize_mask
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .metrics import ScoredSet, auroc
from .nn import Adam, glorot_uniform
from .synth import load_image, load_manifest

CLASSES = ("right_opacity", "left_opacity")

# negative-slope used for the attention map inside the training objective only;
# evaluation-time Grad-CAM keeps the strict ReLU
CAM_LEAK = 0.01
# floor for the sum-normalization of the training attention map
PIXEL_NORM_EPS = 1e-6


class GainError(ValueError):
    pass


@dataclass
class ClassifierConfig:
    image_size: int = 64
    conv_channels: tuple[int, ...] = (8, 16, 32, 32)
    conv_strides: tuple[int, ...] = (2, 2, 2, 1)
    n_classes: int = 2


class Classifier:
    """Conv backbone ending in a designated final conv layer (retained for
    Grad-CAM), global average pool, sigmoid dense head.

    The grayscale input is augmented with fixed x/y coordinate ramp channels:
    the class pair differs only by lesion side, and without a positional cue
    the globally pooled conv features are blind to that distinction."""

    N_COORD_CHANNELS = 2

    def __init__(self, config: ClassifierConfig | None = None, seed: int = 0):
        self.config = config or ClassifierConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self._p: dict[str, Tensor] = {}
        c_in = 1 + self.N_COORD_CHANNELS
        grid = cfg.image_size
        for i, (c_out, stride) in enumerate(zip(cfg.conv_channels, cfg.conv_strides)):
            self._p[f"conv{i}.k"] = Tensor(glorot_uniform(rng, (c_out, c_in, 3, 3)),
                                           requires_grad=True)
            self._p[f"conv{i}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
            grid = grid // stride  # 3x3 pad-1 conv keeps the extent; pooling halves it
            c_in = c_out
        self.grid = grid
        self._p["head.W"] = Tensor(glorot_uniform(rng, (cfg.n_classes, c_in)),
                                   requires_grad=True)
        self._p["head.b"] = Tensor(np.zeros(cfg.n_classes), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return dict(self._p)

    def _coord_channels(self, batch: int) -> np.ndarray:
        size = self.config.image_size
        ramp = np.linspace(0.0, 1.0, size)
        xs = np.broadcast_to(ramp[None, :], (size, size))
        ys = np.broadcast_to(ramp[:, None], (size, size))
        return np.broadcast_to(np.stack([xs, ys])[None], (batch, 2, size, size))

    def forward(self, images: np.ndarray | Tensor):
        """Returns (scores [B,n_classes] in (0,1), final conv activations
        [B,C,g,g])."""
        x = images if isinstance(images, Tensor) else Tensor(
            images[:, None] if np.asarray(images).ndim == 3 else images)
        x = ad.concat([x, Tensor(self._coord_channels(x.data.shape[0]))], axis=1)
        for i, stride in enumerate(self.config.conv_strides):
            x = ad.conv2d(x, self._p[f"conv{i}.k"], stride=1, pad=1)
            x = (x + self._p[f"conv{i}.b"].reshape(1, -1, 1, 1)).relu()
            if stride > 1:
                x = ad.max_pool2d(x, stride)
        act = x
        pooled = ad.global_avg_pool(act)
        scores = ad.dense(pooled, self._p["head.W"], self._p["head.b"]).sigmoid()
        return scores, act


@dataclass
class AttentionMap:
    """Per-class Grad-CAM map on the conv grid plus an image-resolution
    copy. `normalized` is min-max scaled to [0,1]; a constant raw map
    normalizes to all zeros."""
    raw: np.ndarray
    normalized: np.ndarray
    upsampled: np.ndarray


@dataclass
class GainHyper:
    lam: float = 1.0
    alpha: float = 0.5
    omega: float = 100.0
    mask_k: float = 100.0
    mask_tau: float = 0.5
    lr: float = 3e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.lam, self.alpha, self.omega) < 0:
            raise GainError("loss weights must be >= 0")
        if not (0.0 < self.mask_tau < 1.0):
            raise GainError("mask threshold must lie in (0, 1)")


@dataclass
class GainLossTerms:
    """The three weighted loss terms; total is their exact sum."""
    classification: float
    attention_mining: float
    pixel: float
    total: float


def _cam_weights(scores: Tensor, act: Tensor, c: int) -> np.ndarray:
    """Grad-CAM channel weights: spatially pooled d(score_c)/d(activations),
    one vector per sample. Uses a throwaway backward pass."""
    if not (0 <= c < scores.data.shape[1]):
        raise GainError(f"class index {c} out of range")
    ad.backward(scores[:, c].sum())
    g = act.grad
    if g is None:
        raise GainError("activations are disconnected from the score")
    return g.mean(axis=(2, 3))  # [B,C]


def _normalization_constants(raw: np.ndarray):
    """Per-sample min and 1/(max-min); constant maps get scale 0 so they
    normalize to zero."""
    flat = raw.reshape(raw.shape[0], -1)
    mn = flat.min(axis=1)
    mx = flat.max(axis=1)
    rng = mx - mn
    scale = np.where(rng > 0, 1.0 / np.where(rng > 0, rng, 1.0), 0.0)
    return mn, scale


def _upsample_nearest(maps: np.ndarray, size: int) -> np.ndarray:
    factor = size // maps.shape[-1]
    return np.repeat(np.repeat(maps, factor, axis=-2), factor, axis=-1)


def gradcam(model: Classifier, image: np.ndarray, c: int) -> AttentionMap:
    """Grad-CAM for one image and one class."""
    scores, act = model.forward(image[None])
    w = _cam_weights(scores, act, c)
    raw = np.maximum((w[:, :, None, None] * act.data).sum(axis=1), 0.0)
    mn, scale = _normalization_constants(raw)
    normalized = (raw - mn[:, None, None]) * scale[:, None, None]
    up = _upsample_nearest(normalized, model.config.image_size)
    return AttentionMap(raw=raw[0], normalized=normalized[0], upsampled=up[0])


def soft_mask(image: np.ndarray, attention: np.ndarray, k: float, tau: float) -> np.ndarray:
    """Suppress high-attention regions: I * (1 - sigmoid(k (A - tau)))."""
    if image.shape != attention.shape:
        raise GainError(f"size mismatch: image {image.shape} vs attention {attention.shape}")
    T = 1.0 / (1.0 + np.exp(-k * (attention - tau)))
    return image * (1.0 - T)


def _gain_objective(model: Classifier, images: np.ndarray, labels: np.ndarray,
                    masks: np.ndarray | None, hyper: GainHyper, frozen: dict | None = None):
    """Build the composite objective for a batch.

    labels: [B, n_classes] binary. masks: [B, n_classes, g, g] target masks
    with NaN rows marking classes without a mask, or None for no pixel term.

    The attention map is built symbolically: for a global-avg-pool + dense
    head the Grad-CAM channel weights have the closed form
    sigmoid'(z_c) * W[c, k] / g^2, so the map is an ordinary first-order
    expression and the attention terms can steer both the features and the
    head. Per-map normalization constants and the soft masks T are treated
    as non-differentiated (frozen per step); `frozen`, when given, reuses
    them from an earlier call (needed for finite-difference checks of the
    as-trained objective), otherwise they are computed here and returned.
    """
    B = images.shape[0]
    nc = model.config.n_classes
    if images.ndim == 3:
        images = images[:, None]
    scores, act = model.forward(images)
    lc = ad.bce_loss(scores, Tensor(labels.astype(np.float64)))

    need_attention = hyper.alpha > 0 or hyper.omega > 0 or frozen is not None
    frozen_out = {"sp": {}, "T": {}}
    n_gt = labels.sum(axis=1)                       # per-sample class count
    inv_n = np.where(n_gt > 0, 1.0 / np.where(n_gt > 0, n_gt, 1.0), 0.0)

    mining = Tensor(0.0)
    pixel = Tensor(0.0)
    if need_attention:
        inv_area = 1.0 / (model.grid * model.grid)
        for c in range(nc):
            # sigmoid' is a positive per-sample scalar; min-max normalization
            # cancels it, so it is taken as a non-differentiated constant
            # (differentiating it lets the attention terms cheat by
            # saturating the score instead of moving the map)
            if frozen is not None:
                sig_prime = frozen["sp"][c]
            else:
                sig_prime = scores.data[:, c] * (1.0 - scores.data[:, c])  # [B]
                frozen_out["sp"][c] = sig_prime
            w = (Tensor(sig_prime[:, None])
                 * model._p["head.W"][c].reshape(1, -1)) * inv_area        # [B,C]
            pre = (act * w.reshape(B, -1, 1, 1)).sum(axis=1)               # [B,g,g]
            # leaky rectification: a strict ReLU lets training collapse into
            # an all-negative (dead, gradient-free) attention map
            raw = pre.relu() - (pre * -1.0).relu() * CAM_LEAK
            gt_c = labels[:, c].astype(np.float64)
            weight = gt_c * inv_n                                           # [B]

            if hyper.alpha > 0:
                if frozen is not None:
                    T = frozen["T"][c]
                else:
                    mn, scale = _normalization_constants(raw.data)
                    normalized = (raw.data - mn[:, None, None]) * scale[:, None, None]
                    up = _upsample_nearest(normalized, model.config.image_size)
                    T = 1.0 / (1.0 + np.exp(-hyper.mask_k * (up - hyper.mask_tau)))
                    frozen_out["T"][c] = T
                masked = images * (1.0 - T[:, None])
                scores2, _ = model.forward(masked)
                mining = mining + (scores2[:, c] * Tensor(weight)).sum() * (1.0 / B)

            if masks is not None and hyper.omega > 0:
                mrow = masks[:, c]
                have = ~np.isnan(mrow.reshape(B, -1)).any(axis=1)
                target = np.nan_to_num(mrow)
                t_sum = target.reshape(B, -1).sum(axis=1)
                have = have & (t_sum > 0)           # a box may rasterize empty
                # omitted masks contribute 0 and reduce the per-sample count
                n_pix = (labels * _mask_presence(masks)).sum(axis=1)
                inv_pix = np.where(n_pix > 0, 1.0 / np.where(n_pix > 0, n_pix, 1.0), 0.0)
                w_pix = gt_c * have * inv_pix
                # compare sum-normalized attention with the sum-normalized
                # target so the term measures where attention sits, not its
                # (head-scale dependent) magnitude
                denom = pre.relu().sum(axis=(1, 2)) + PIXEL_NORM_EPS        # [B]
                attn = raw / denom.reshape(-1, 1, 1)
                target = target / np.where(t_sum > 0, t_sum, 1.0)[:, None, None]
                diff = attn - Tensor(target)
                per_sample = (diff * diff).sum(axis=(1, 2))
                pixel = pixel + (per_sample * Tensor(w_pix)).sum() * (1.0 / B)

    term_c = lc * hyper.lam
    term_a = mining * hyper.alpha
    term_p = pixel * hyper.omega
    total = term_c + term_a + term_p
    return total, (term_c, term_a, term_p), scores, frozen_out


def _mask_presence(masks: np.ndarray) -> np.ndarray:
    B, nc = masks.shape[:2]
    return (~np.isnan(masks.reshape(B, nc, -1)).any(axis=2)).astype(np.float64)


def gain_loss(model: Classifier, images: np.ndarray, labels: np.ndarray,
              masks: np.ndarray | None, hyper: GainHyper) -> GainLossTerms:
    total, (tc, ta, tp), _, _ = _gain_objective(model, images, labels, masks, hyper)
    for name, term in (("classification", tc), ("attention-mining", ta), ("pixel", tp)):
        ad.assert_finite(term, f"{name} term")
    return GainLossTerms(
        classification=float(tc.data), attention_mining=float(ta.data),
        pixel=float(tp.data), total=float(tc.data) + float(ta.data) + float(tp.data))


# -- training ----------------------------------------------------------------


def _load_split(manifest_path, split: str):
    root = Path(manifest_path).parent
    out = []
    for rec in load_manifest(manifest_path):
        if rec["split"] != split:
            continue
        out.append({
            "sample_id": rec["sample_id"],
            "image": load_image(root, rec["image"]),
            "labels": np.array([rec["right_opacity"], rec["left_opacity"]], dtype=np.float64),
            "boxes": rec["boxes"],
        })
    return out


def masks_from_boxes(samples, box_lookup, grid: int) -> None:
    """Attach [n_classes,g,g] target masks to each sample; classes without a
    box get NaN rows. box_lookup: sample_id -> {class_name: NormalizedBox}."""
    for s in samples:
        m = np.full((len(CLASSES), grid, grid), np.nan)
        boxes = box_lookup.get(s["sample_id"], {})
        for c, cname in enumerate(CLASSES):
            if cname in boxes:
                m[c] = rasterize_mask(boxes[cname], grid, grid)
        s["masks"] = m


def truth_box_lookup(manifest_path) -> dict:
    out = {}
    for rec in load_manifest(manifest_path):
        entry = {}
        for side, box in rec["boxes"].items():
            entry[f"{side}_opacity"] = NormalizedBox(*box)
        out[rec["sample_id"]] = entry
    return out


def train_gain(manifest_path, hyper: GainHyper, ckpt_path, metrics_path,
               box_lookup: dict | None = None, init_ckpt=None,
               config: ClassifierConfig | None = None):
    """Per step: forward, Grad-CAM, soft mask, second forward through the
    same weights, composite loss, backward, Adam. Keeps the checkpoint with
    the best validation AUROC (mean over classes)."""
    config = config or ClassifierConfig()
    train = _load_split(manifest_path, "train")
    val = _load_split(manifest_path, "val")
    if not train or not val:
        raise GainError("empty train or val split")

    model = Classifier(config, seed=hyper.seed)
    if init_ckpt is not None:
        meta, arrays, _ = load_checkpoint(init_ckpt)
        restore_params(model.params(), arrays)

    use_masks = box_lookup is not None and hyper.omega > 0
    if use_masks:
        masks_from_boxes(train, box_lookup, model.grid)

    opt = Adam(model.params(), lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed)
    best_auroc = -1.0
    history = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train))
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), hyper.batch_size):
            batch = [train[i] for i in order[start:start + hyper.batch_size]]
            images = np.stack([b["image"] for b in batch])
            labels = np.stack([b["labels"] for b in batch])
            masks = np.stack([b["masks"] for b in batch]) if use_masks else None

            total, terms, _, _ = _gain_objective(model, images, labels, masks, hyper)
            for name, term in (("classification", terms[0]),
                               ("attention-mining", terms[1]), ("pixel", terms[2])):
                ad.assert_finite(term, f"{name} term")
            opt.zero_grad()
            ad.backward(total)
            opt.step()
            sums += [float(t.data) for t in terms] + [float(total.data)]
            n_batches += 1

        means = sums / n_batches
        val_auc = _val_auroc(model, val)
        history.append({"epoch": epoch, "classification": means[0],
                        "attention_mining": means[1], "pixel": means[2],
                        "total": means[3], "val_auroc": val_auc})
        if val_auc >= best_auroc:  # ties go to the later, lower-loss epoch
            best_auroc = val_auc
            save_checkpoint(ckpt_path, "classifier", model.params(), adam=opt.state,
                            extra={"config": asdict(config), "epoch": epoch,
                                   "val_auroc": val_auc, "classes": list(CLASSES)})

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "classification",
                                                "attention_mining", "pixel",
                                                "total", "val_auroc"])
        writer.writeheader()
        writer.writerows(history)
    return history


def train_baseline(manifest_path, hyper: GainHyper, ckpt_path, metrics_path,
                   config: ClassifierConfig | None = None):
    """Plain BCE classifier: the composite loss with alpha = omega = 0."""
    plain = GainHyper(lam=1.0, alpha=0.0, omega=0.0, lr=hyper.lr,
                      epochs=hyper.epochs, batch_size=hyper.batch_size,
                      seed=hyper.seed, mask_k=hyper.mask_k, mask_tau=hyper.mask_tau)
    return train_gain(manifest_path, plain, ckpt_path, metrics_path,
                      box_lookup=None, config=config)


def _score_split(model: Classifier, samples, batch_size: int = 64) -> np.ndarray:
    scores = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        images = np.stack([b["image"] for b in batch])
        s, _ = model.forward(images)
        scores.append(s.data)
    return np.concatenate(scores)


def _val_auroc(model: Classifier, val) -> float:
    scores = _score_split(model, val)
    labels = np.stack([b["labels"] for b in val])
    aucs = []
    for c in range(len(CLASSES)):
        if 0 < labels[:, c].sum() < len(val):
            aucs.append(auroc(ScoredSet(scores[:, c], labels[:, c], CLASSES[c])))
    return float(np.mean(aucs)) if aucs else 0.5


def load_classifier(ckpt_path) -> Classifier:
    meta, arrays, _ = load_checkpoint(ckpt_path)
    if meta["model"] != "classifier":
        raise GainError(f"checkpoint holds a {meta['model']!r} model")
    cfg_dict = dict(meta["extra"]["config"])
    for key in ("conv_channels", "conv_strides"):
        cfg_dict[key] = tuple(cfg_dict[key])
    model = Classifier(ClassifierConfig(**cfg_dict))
    restore_params(model.params(), arrays)
    return model
