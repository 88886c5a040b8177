"""Hybrid image + location-token box regressor: conv features and a
Bi-LSTM encoding of the location phrase, fused to four sigmoid outputs
(x, y, w, h) in the unit square."""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .atlas import LOCATION_LABELS, NormalizedBox, mean_iou, iou
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .nn import Adam, DropoutSpec, LstmParams, bilstm_encode, glorot_uniform
from .synth import load_image, load_manifest

PAD_ID = 0


def build_vocab() -> dict[str, int]:
    words = sorted({w for label in LOCATION_LABELS for w in label.split()}
                   | {"left", "right", "bilateral"})
    return {w: i + 1 for i, w in enumerate(words)}  # 0 reserved for padding


VOCAB = build_vocab()


class Text2BoxError(ValueError):
    pass


def encode_tokens(laterality: str, locations, max_steps: int = 16) -> tuple[np.ndarray, int]:
    """Token ids for a (laterality, location phrases) query, padded to
    max_steps; returns (ids, true length)."""
    words = []
    if laterality.lower() in ("left", "right", "bilateral"):
        words.append(laterality.lower())
    for label in sorted(locations):
        words.extend(label.split())
    words = words[:max_steps]
    if not words:
        raise Text2BoxError("empty token sequence")
    ids = np.full(max_steps, PAD_ID, dtype=np.int64)
    for i, w in enumerate(words):
        if w not in VOCAB:
            raise Text2BoxError(f"word '{w}' not in vocabulary")
        ids[i] = VOCAB[w]
    return ids, len(words)


@dataclass
class Text2BoxConfig:
    image_size: int = 64
    conv_channels: tuple[int, ...] = (8, 16, 32, 32)
    conv_strides: tuple[int, ...] = (2, 2, 2, 1)
    pool_window: int = 1
    d_img: int = 32
    emb_dim: int = 8
    hidden_size: int = 16
    fusion_hidden: int = 32
    max_steps: int = 16
    dropout: float = 0.25
    recurrent_dropout: float = 0.1


class Text2BoxModel:
    def __init__(self, config: Text2BoxConfig | None = None, seed: int = 0):
        self.config = config or Text2BoxConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self._p: dict[str, Tensor] = {}

        c_in = 1
        grid = cfg.image_size
        for i, (c_out, stride) in enumerate(zip(cfg.conv_channels, cfg.conv_strides)):
            self._p[f"conv{i}.k"] = Tensor(glorot_uniform(rng, (c_out, c_in, 3, 3)),
                                           requires_grad=True)
            self._p[f"conv{i}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
            grid = grid // stride  # 3x3 pad-1 conv keeps the extent; pooling halves it
            c_in = c_out
        self.grid = grid
        pooled = grid // cfg.pool_window
        flat = cfg.conv_channels[-1] * pooled * pooled
        self._p["img_fc.W"] = Tensor(glorot_uniform(rng, (cfg.d_img, flat)), requires_grad=True)
        self._p["img_fc.b"] = Tensor(np.zeros(cfg.d_img), requires_grad=True)

        vocab_size = len(VOCAB) + 1
        self._p["emb"] = Tensor(glorot_uniform(rng, (vocab_size, cfg.emb_dim)),
                                requires_grad=True)
        self.fwd = LstmParams(cfg.emb_dim, cfg.hidden_size, rng, prefix="lstm_fwd")
        self.bwd = LstmParams(cfg.emb_dim, cfg.hidden_size, rng, prefix="lstm_bwd")

        fuse_in = cfg.d_img + 2 * cfg.hidden_size
        self._p["fuse1.W"] = Tensor(glorot_uniform(rng, (cfg.fusion_hidden, fuse_in)),
                                    requires_grad=True)
        self._p["fuse1.b"] = Tensor(np.zeros(cfg.fusion_hidden), requires_grad=True)
        self._p["head.W"] = Tensor(glorot_uniform(rng, (4, cfg.fusion_hidden)),
                                   requires_grad=True)
        self._p["head.b"] = Tensor(np.zeros(4), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        out = dict(self._p)
        out.update(self.fwd.params())
        out.update(self.bwd.params())
        return out

    def encode_image(self, images: np.ndarray) -> Tensor:
        cfg = self.config
        x = Tensor(images)
        for i, stride in enumerate(cfg.conv_strides):
            k = self._p[f"conv{i}.k"]
            b = self._p[f"conv{i}.b"]
            x = ad.conv2d(x, k, stride=1, pad=1)
            x = (x + b.reshape(1, -1, 1, 1)).relu()
            if stride > 1:
                x = ad.max_pool2d(x, stride)
        x = ad.avg_pool2d(x, cfg.pool_window) if cfg.pool_window > 1 else x
        x = x.reshape(x.shape[0], -1)
        return ad.dense(x, self._p["img_fc.W"], self._p["img_fc.b"]).relu()

    def encode_tokens(self, token_ids: np.ndarray, lengths: np.ndarray,
                      training: bool = False, seed: int = 0) -> Tensor:
        cfg = self.config
        emb = ad.embedding(token_ids, self._p["emb"])          # [B,T,d]
        seq = [emb[:, t] for t in range(token_ids.shape[1])]
        spec = DropoutSpec(rate=cfg.dropout, recurrent_rate=cfg.recurrent_dropout,
                           training=training, seed=seed)
        return bilstm_encode(seq, self.fwd, self.bwd, spec, lengths=lengths)

    def forward(self, images: np.ndarray, token_ids: np.ndarray, lengths: np.ndarray,
                training: bool = False, seed: int = 0) -> Tensor:
        """Raw sigmoid outputs [B,4]."""
        if images.ndim == 3:
            images = images[:, None]
        img_vec = self.encode_image(images)
        txt_vec = self.encode_tokens(token_ids, lengths, training=training, seed=seed)
        fused = ad.concat([img_vec, txt_vec], axis=1)
        h = ad.dense(fused, self._p["fuse1.W"], self._p["fuse1.b"]).relu()
        return ad.dense(h, self._p["head.W"], self._p["head.b"]).sigmoid()


def outputs_to_box(raw: np.ndarray) -> NormalizedBox:
    """Map 4 sigmoid outputs to a valid NormalizedBox: floor w,h at 1e-3,
    clip x,y so the box stays inside the unit square."""
    x, y, w, h = (float(v) for v in raw)
    w = min(max(w, 1e-3), 1.0 - 1e-9)
    h = min(max(h, 1e-3), 1.0 - 1e-9)
    x = min(max(x, 0.0), 1.0 - w)
    y = min(max(y, 0.0), 1.0 - h)
    return NormalizedBox(x, y, w, h)


def predict_box(model: Text2BoxModel, image: np.ndarray, laterality: str,
                locations) -> NormalizedBox:
    ids, length = encode_tokens(laterality, locations, model.config.max_steps)
    raw = model.forward(image[None, None] if image.ndim == 2 else image[None],
                        ids[None], np.array([length]))
    return outputs_to_box(raw.data[0])


def t2b_loss(pred: Tensor, truth: np.ndarray) -> Tensor:
    """MSE over the four box parameters."""
    diff = pred - Tensor(truth)
    return (diff * diff).mean()


def _manifest_pairs(manifest_path, split: str, max_steps: int):
    root = Path(manifest_path).parent
    pairs = []
    for rec in load_manifest(manifest_path):
        if rec["split"] != split:
            continue
        for side, box in sorted(rec["boxes"].items()):
            zone = rec["zones"][side]
            ids, length = encode_tokens(side, [zone], max_steps)
            pairs.append({
                "image": load_image(root, rec["image"]),
                "ids": ids, "length": length,
                "box": np.asarray(box, dtype=np.float64),
                "sample_id": rec["sample_id"], "zone": zone, "side": side,
            })
    return pairs


@dataclass
class T2BHyper:
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 32
    seed: int = 0


def train_text2box(manifest_path, hyper: T2BHyper, ckpt_path, metrics_path,
                   config: Text2BoxConfig | None = None):
    """Adam training on train split; keeps the checkpoint with the best
    validation mIOU. Metrics CSV columns: epoch, train_loss, val_miou."""
    config = config or Text2BoxConfig()
    train = _manifest_pairs(manifest_path, "train", config.max_steps)
    val = _manifest_pairs(manifest_path, "val", config.max_steps)
    if not train or not val:
        raise Text2BoxError("empty train or val split")

    model = Text2BoxModel(config, seed=hyper.seed)
    opt = Adam(model.params(), lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed)
    best_miou = -1.0
    history = []
    step = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), hyper.batch_size):
            batch = [train[i] for i in order[start:start + hyper.batch_size]]
            images = np.stack([b["image"] for b in batch])[:, None]
            ids = np.stack([b["ids"] for b in batch])
            lengths = np.array([b["length"] for b in batch])
            truth = np.stack([b["box"] for b in batch])

            pred = model.forward(images, ids, lengths, training=True,
                                 seed=hyper.seed * 1_000_003 + step)
            loss = t2b_loss(pred, truth)
            ad.assert_finite(loss, "text2box loss")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            step += 1

        val_miou = _eval_pairs(model, val)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_miou": val_miou})
        if val_miou > best_miou:
            best_miou = val_miou
            save_checkpoint(ckpt_path, "text2box", model.params(), adam=opt.state,
                            extra={"config": asdict(config), "epoch": epoch,
                                   "val_miou": val_miou})

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_miou"])
        writer.writeheader()
        writer.writerows(history)
    return history


def _eval_pairs(model: Text2BoxModel, pairs, batch_size: int = 64):
    ious = _pair_ious(model, pairs, batch_size)
    return float(np.mean(ious))


def _pair_ious(model: Text2BoxModel, pairs, batch_size: int = 64):
    ious = []
    for start in range(0, len(pairs), batch_size):
        batch = pairs[start:start + batch_size]
        images = np.stack([b["image"] for b in batch])[:, None]
        ids = np.stack([b["ids"] for b in batch])
        lengths = np.array([b["length"] for b in batch])
        raw = model.forward(images, ids, lengths).data
        for row, b in zip(raw, batch):
            ious.append(iou(outputs_to_box(row), NormalizedBox(*b["box"])))
    return ious


def load_text2box(ckpt_path) -> Text2BoxModel:
    meta, arrays, _ = load_checkpoint(ckpt_path)
    if meta["model"] != "text2box":
        raise Text2BoxError(f"checkpoint holds a {meta['model']!r} model")
    cfg_dict = dict(meta["extra"]["config"])
    for key in ("conv_channels", "conv_strides"):
        cfg_dict[key] = tuple(cfg_dict[key])
    model = Text2BoxModel(Text2BoxConfig(**cfg_dict))
    restore_params(model.params(), arrays)
    return model


def eval_text2box(ckpt_path, manifest_path, split: str = "val"):
    """Returns (mIOU, per-sample list of dicts)."""
    model = load_text2box(ckpt_path)
    pairs = _manifest_pairs(manifest_path, split, model.config.max_steps)
    if not pairs:
        raise Text2BoxError(f"split '{split}' is empty")
    per_sample = []
    for b in pairs:
        pred = predict_box(model, b["image"], b["side"], [b["zone"]])
        per_sample.append({
            "sample_id": b["sample_id"], "side": b["side"], "zone": b["zone"],
            "iou": iou(pred, NormalizedBox(*b["box"])),
            "pred": pred, "truth": NormalizedBox(*b["box"]),
            "image": b["image"],
        })
    miou = float(np.mean([p["iou"] for p in per_sample]))
    return miou, per_sample
