"""Joint training of the three branches with a momentum key encoder and a FIFO bank."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .clsbranch import FilterPredictor, cls_loss_terms, gaussian_label, score_map
from .config import IATConfig
from .encoders import EncoderSet, MemoryEncoder, init_memory_encoder, momentum_update
from .geometry import image_to_tensor
from .instbranch import (OBJECT, SEPARATED, SHARED, VIDEO, InstanceBoostingModule,
                         MemoryBank, fused_forward, infonce_loss, select_negatives)
from .regbranch import BoxScorer, kl_cross_entropy, label_log_density, sample_candidates, to_param
from .synthvid import TrainingPair, VideoSample, sample_pair

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class CheckpointError(RuntimeError):
    pass


class IATNet(nn.Module):
    """Backbone, target-model generator, box scorer and (optionally) the boosting head(s)."""

    def __init__(self, cfg: IATConfig):
        super().__init__()
        self.cfg = cfg
        self.encoders = EncoderSet(cfg.backbone)
        C, stride = cfg.backbone.out_channels, cfg.backbone.stride
        self.predictor = FilterPredictor(C, cfg.cls.filter_size, stride)
        self.scorer = BoxScorer(C, cfg.crop.search_size, stride, cfg.reg.pool_size, cfg.reg.hidden)
        inst = cfg.inst
        self.psi = None
        self.psi_v = None
        if inst.K > 0:
            kind = VIDEO if inst.variant == "video" else OBJECT
            self.psi = InstanceBoostingModule(C, kind, inst.F, inst.embed_dim, inst.hidden,
                                              stride, inst.global_pool)
            if inst.variant == "fused_separated":
                self.psi_v = InstanceBoostingModule(C, OBJECT, inst.F, inst.embed_dim,
                                                    inst.hidden, stride, inst.global_pool)

    @property
    def backbone(self):
        return self.encoders.backbone

    @property
    def has_instance_branch(self) -> bool:
        return self.psi is not None

    def boosting_calls(self) -> int:
        return sum(m.calls for m in (self.psi, self.psi_v) if m is not None)

    def embed(self, features: torch.Tensor, boxes) -> torch.Tensor:
        """Unit-norm instance embeddings for ``N`` feature maps."""
        variant = self.cfg.inst.variant
        if variant == "fused_shared":
            z = fused_forward(None, self.psi, features, boxes, SHARED)
        elif variant == "fused_separated":
            z = fused_forward(self.psi_v, self.psi, features, boxes, SEPARATED)
        elif variant == "video":
            z = self.psi(features)
        else:
            z = self.psi(features, boxes)
        return F.normalize(z, dim=-1)


def build_network(cfg: IATConfig, seed: int | None = None, dtype=torch.float32) -> IATNet:
    seed = cfg.train.seed if seed is None else seed
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = IATNet(cfg)
    return net.to(dtype)


@dataclass
class Batch:
    templates: torch.Tensor
    searches: torch.Tensor
    template_boxes: list[np.ndarray]
    search_boxes: list[np.ndarray]
    video_ids: list[int]
    labels: torch.Tensor
    y: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.video_ids)


def make_batch(pairs: list[TrainingPair], cfg: IATConfig, dtype=torch.float32) -> Batch:
    stride = cfg.backbone.stride
    size = _feature_size(cfg.crop.search_size, cfg)
    labels = torch.stack([gaussian_label(p.search_box[:2], stride, (size, size), cfg.cls.sigma, dtype)
                          for p in pairs])
    return Batch(
        templates=image_to_tensor([p.template for p in pairs]).to(dtype),
        searches=image_to_tensor([p.search for p in pairs]).to(dtype),
        template_boxes=[p.template_box for p in pairs],
        search_boxes=[p.search_box for p in pairs],
        video_ids=[p.video_id for p in pairs],
        labels=labels,
        y=[to_param(p.search_box, cfg.crop.search_size) for p in pairs],
    )


def _feature_size(size: int, cfg: IATConfig) -> int:
    for s in cfg.backbone.strides:
        size = (size + 2 - 3) // s + 1
    return size


def lr_at_epoch(cfg: IATConfig, epoch: int) -> float:
    t = cfg.train
    return t.lr * t.lr_decay ** sum(1 for e in t.decay_epochs if epoch >= e)


class Trainer:
    """Owns the network, memory encoder, key bank, optimizer and all random streams."""

    def __init__(self, cfg: IATConfig, dataset: list[VideoSample] | None = None,
                 dtype=torch.float32):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset or []
        self.dtype = dtype
        self.net = build_network(cfg, dtype=dtype)
        self.memory = init_memory_encoder(self.net.backbone, cfg.inst.momentum)
        self.bank = MemoryBank(cfg.inst.K, cfg.inst.embed_dim, init="random",
                               seed=cfg.train.seed, dtype=dtype)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=cfg.train.lr)
        self.data_rng = np.random.default_rng([cfg.train.seed, 1])
        self.cand_rng = np.random.default_rng([cfg.train.seed, 2])
        self.step = 0

    # -- schedule ---------------------------------------------------------
    def epoch(self, step: int | None = None) -> int:
        step = self.step if step is None else step
        return step // self.cfg.train.steps_per_epoch

    def lr(self, step: int | None = None) -> float:
        return lr_at_epoch(self.cfg, self.epoch(step))

    # -- data ---------------------------------------------------------------
    def next_batch(self) -> Batch:
        pairs = [sample_pair(self.dataset, self.data_rng, self.cfg.crop)
                 for _ in range(self.cfg.train.batch_size)]
        return make_batch(pairs, self.cfg, self.dtype)

    def draw_candidates(self, batch: Batch):
        r = self.cfg.reg
        return [sample_candidates(y, r.sigma_y, r.num_candidates, self.cand_rng, self.dtype)
                for y in batch.y]

    # -- losses ------------------------------------------------------------
    def compute_losses(self, batch: Batch, candidates, include_instance: bool = True,
                       keys: torch.Tensor | None = None) -> dict:
        """All loss terms for ``batch``; pure apart from the ψ/bank access counters.

        Keys carry no gradient.  Passing ``keys`` reuses them instead of
        re-encoding the search crops, which is what a finite-difference check
        of the stop-gradient objective needs.
        """
        cfg = self.cfg
        net = self.net
        feat_t = net.backbone(batch.templates)
        feat_s = net.backbone(batch.searches)

        g = net.predictor(feat_t, batch.template_boxes)
        scores = score_map(feat_s, g)
        data, reg = cls_loss_terms(scores, batch.labels, g, cfg.cls.reg_factor)
        l_cls = data + reg

        l_reg = 0.0
        for b, (cands, log_q) in enumerate(candidates):
            logits = net.scorer(feat_s[b], cands)
            log_p = label_log_density(cands, torch.as_tensor(batch.y[b], dtype=cands.dtype),
                                      cfg.reg.sigma_y)
            l_reg = l_reg + kl_cross_entropy(logits, log_q, log_p)
        l_reg = l_reg / len(candidates)

        out = {"L_cls": l_cls, "L_cls_data": data, "L_cls_reg": reg, "L_reg": l_reg,
               "scores": scores}
        w = cfg.train.weights
        if include_instance and net.has_instance_branch:
            q = net.embed(feat_t, batch.template_boxes)
            if keys is None:
                with torch.no_grad():
                    k = net.embed(self.memory(batch.searches), batch.search_boxes)
            else:
                k = keys.detach()
            l_ins = 0.0
            neg_sims = []
            for b in range(len(batch)):
                negs = select_negatives(self.bank, batch.video_ids[b])
                l_ins = l_ins + infonce_loss(q[b], k[b], negs, cfg.inst.tau)
                if len(negs):
                    neg_sims.append(float((negs @ q[b].detach()).mean()))
            l_ins = l_ins / len(batch)
            out.update(L_ins=l_ins, q=q, k=k,
                       pos_sim=float((q.detach() * k).sum(1).mean()),
                       neg_sim=float(np.mean(neg_sims)) if neg_sims else float("nan"))
            total = w.cls * l_cls + w.reg * l_reg + w.ins * l_ins
        else:
            out.update(L_ins=torch.zeros((), dtype=self.dtype), q=None, k=None,
                       pos_sim=float("nan"), neg_sim=float("nan"))
            total = w.cls * l_cls + w.reg * l_reg
        out["total"] = total
        return out

    # -- one iteration -------------------------------------------------------
    def train_step(self, batch: Batch | None = None, update_bank: bool = True) -> dict:
        batch = batch if batch is not None else self.next_batch()
        candidates = self.draw_candidates(batch)
        lr = self.lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        losses = self.compute_losses(batch, candidates)
        total = losses["total"]
        if not bool(torch.isfinite(total)):
            snapshot = {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
                        for k, v in losses.items()
                        if isinstance(v, (float, torch.Tensor)) and getattr(v, "dim", lambda: 0)() == 0}
            snapshot.update(step=self.step, lr=lr, video_ids=list(batch.video_ids))
            raise TrainingAborted(f"non-finite total loss at step {self.step}", snapshot)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        if update_bank and losses["k"] is not None:
            for key, vid in zip(losses["k"], batch.video_ids):
                self.bank.enqueue(key, vid)
        momentum_update(self.memory, self.net.backbone)
        self.step += 1
        return {
            "step": self.step,
            "L_cls": float(losses["L_cls"].detach()),
            "L_reg": float(losses["L_reg"].detach()),
            "L_ins": float(losses["L_ins"].detach()),
            "total": float(total.detach()),
            "lr": lr,
            "pos_sim": losses["pos_sim"],
            "neg_sim": losses["neg_sim"],
        }

    # -- persistence --------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name, t in self.net.state_dict().items():
            arrays[f"net/{name}"] = t.detach().cpu().numpy().copy()
        for name, t in self.memory.net.state_dict().items():
            arrays[f"memory/{name}"] = t.detach().cpu().numpy().copy()
        opt = self.optimizer.state_dict()
        for idx, st in opt["state"].items():
            for key, val in st.items():
                arrays[f"optim/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
        bank = self.bank.state()
        arrays["bank/keys"] = bank["keys"]
        arrays["bank/tags"] = bank["tags"]
        meta = {
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "step": self.step,
            "momentum": self.memory.momentum,
            "data_rng": self.data_rng.bit_generator.state,
            "cand_rng": self.cand_rng.bit_generator.state,
        }
        arrays["meta"] = np.array(json.dumps(meta))
        return arrays

    def save_checkpoint(self, path: str | Path) -> Path:
        return write_checkpoint(self.state_arrays(), path)

    def load_checkpoint(self, path: str | Path) -> None:
        """Restore everything from ``path``; refuses on config mismatch, mutates nothing on error."""
        arrays, meta = read_checkpoint(path)
        if meta["config_hash"] != self.cfg.hash():
            raise CheckpointError(
                f"{path}: checkpoint config hash {meta['config_hash']} != live config {self.cfg.hash()}")
        net_sd = {k: torch.as_tensor(arrays[f"net/{k}"]) for k in self.net.state_dict()}
        mem_sd = {k: torch.as_tensor(arrays[f"memory/{k}"]) for k in self.memory.net.state_dict()}
        for sd, live in ((net_sd, self.net.state_dict()), (mem_sd, self.memory.net.state_dict())):
            for k, v in sd.items():
                if v.shape != live[k].shape:
                    raise CheckpointError(f"{path}: shape mismatch for {k}")
        opt_state = {}
        for key, arr in arrays.items():
            if key.startswith("optim/"):
                _, idx, name = key.split("/")
                opt_state.setdefault(int(idx), {})[name] = torch.as_tensor(arr)
        # everything validated: apply
        self.net.load_state_dict({k: v.to(self.dtype) for k, v in net_sd.items()})
        self.memory.net.load_state_dict({k: v.to(self.dtype) for k, v in mem_sd.items()})
        sd = self.optimizer.state_dict()
        sd["state"] = opt_state
        self.optimizer.load_state_dict(sd)
        self.bank.load_state(arrays["bank/keys"], arrays["bank/tags"])
        self.step = int(meta["step"])
        self.data_rng.bit_generator.state = meta["data_rng"]
        self.cand_rng.bit_generator.state = meta["cand_rng"]


def write_checkpoint(arrays: dict[str, np.ndarray], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
        meta = json.loads(str(arrays.pop("meta")))
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    for key in ("config", "config_hash", "step", "data_rng", "cand_rng"):
        if key not in meta:
            raise CheckpointError(f"{path}: checkpoint metadata lacks {key!r}")
    return arrays, meta


def load_network(path: str | Path, cfg: IATConfig | None = None) -> tuple[IATNet, IATConfig]:
    """Network weights from a checkpoint; with ``cfg`` given, its hash must match."""
    from .config import from_dict

    arrays, meta = read_checkpoint(path)
    ck_cfg = from_dict(meta["config"])
    if cfg is not None and cfg.hash() != meta["config_hash"]:
        raise CheckpointError(
            f"{path}: checkpoint config hash {meta['config_hash']} != live config {cfg.hash()}")
    if cfg is not None:
        # hashes agree, so cfg differs from the stored config in inference-only fields at most
        ck_cfg = cfg
    net = build_network(ck_cfg)
    sd = net.state_dict()
    missing = [k for k in sd if f"net/{k}" not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing weights {missing[:3]}")
    net.load_state_dict({k: torch.as_tensor(arrays[f"net/{k}"]) for k in sd})
    net.eval()
    return net, ck_cfg


def fit(cfg: IATConfig, dataset: list[VideoSample], out_dir: str | Path,
        max_steps: int | None = None, resume: str | Path | None = None,
        progress: bool = False) -> Path:
    """Run the training loop, writing ``metrics.jsonl`` and checkpoints under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, dataset)
    if resume is not None:
        trainer.load_checkpoint(resume)
    total = cfg.train.epochs * cfg.train.steps_per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    mode = "a" if resume is not None else "w"
    with open(out / "metrics.jsonl", mode) as fh:
        while trainer.step < total:
            m = trainer.train_step()
            fh.write(json.dumps(m) + "\n")
            if progress and m["step"] % 50 == 0:
                log.info("step %d total %.4f cls %.4f reg %.4f ins %.4f",
                         m["step"], m["total"], m["L_cls"], m["L_reg"], m["L_ins"])
            every = cfg.train.checkpoint_every
            if every and m["step"] % every == 0 and m["step"] < total:
                trainer.save_checkpoint(out / f"checkpoint_{m['step']:06d}.npz")
    final = trainer.save_checkpoint(out / "checkpoint.npz")
    return final


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
