"""Three-stage conditional generation: chord, melody and accompaniment
transformers driven by the video controller.

Each stage is a :class:`StageNet` trained on its own with teacher forcing.
Inference chains them: chords from the style memory, melody from the
chords, accompaniment from chords + melody, then both parts are merged.
Two collapsed variants (``video2music`` and ``video2chord2music``) reuse
the same network class with different roles.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import nnkit, tokenizer as tk
from .annotate import ChordSymbol, TrackSplit, extract_chords, skyline_split
from .midi import DEFAULT_TPQ, NoteEvent, Score, quantize
from .nnkit import Decoder, Encoder, TransformerConfig
from .video import COLOR_DIM, SEMANTIC_DIM, TIMING_DIM, FeatureBundle, timing_matrix

log = logging.getLogger(__name__)

ABLATIONS = ("semantic", "color", "motion")
MODES = ("vmusprod", "video2music", "video2chord2music")
FIXED_TEMPO = 110.0
MAX_BARS = 512
LENGTH_CAP = {"chord": 2048, "melody": 4096, "accomp": 8192, "video2music": 8192, "chord2music": 8192}

NOTE_ATTRS = tk.STAGE_ATTRIBUTES["melody"]
CHORD_ATTRS = tk.STAGE_ATTRIBUTES["chord"]


@dataclass(frozen=True)
class RoleSpec:
    decoder_attrs: tuple[str, ...]
    grammar: str
    encoder_attrs: tuple[str, ...] = ()
    memory: Optional[str] = None  # "controller" | "encoder"
    timing: bool = False


ROLES = {
    "chord": RoleSpec(CHORD_ATTRS, "chord", memory="controller"),
    "melody": RoleSpec(NOTE_ATTRS, "note", ("type", "barbeat"), "encoder", timing=True),
    "accomp": RoleSpec(NOTE_ATTRS, "note", ("type", "barbeat", "pitch", "duration"), "encoder", timing=True),
    "video2music": RoleSpec(NOTE_ATTRS, "note", memory="controller", timing=True),
    "chord2music": RoleSpec(NOTE_ATTRS, "note", ("type", "barbeat"), "encoder", timing=True),
}

DESK_EMBED = {"type": 16, "barbeat": 32, "pitch": 64, "duration": 32, "root": 32, "quality": 16, "chroma": 32}
PAPER_EMBED = {"type": 32, "barbeat": 128, "pitch": 512, "duration": 128, "root": 128, "quality": 64, "chroma": 128}


@dataclass(frozen=True)
class StageConfig:
    role: str
    net: TransformerConfig = field(default_factory=TransformerConfig)
    embed: tuple[tuple[str, int], ...] = tuple(sorted(DESK_EMBED.items()))
    conditional: bool = True
    ablations: tuple[str, ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation(s) {sorted(bad)}")
        object.__setattr__(self, "ablations", tuple(sorted(set(self.ablations))))
        object.__setattr__(self, "embed", tuple(sorted(dict(self.embed).items())))
        if self.role_spec.memory == "controller" and self.conditional:
            if {"semantic", "color"} <= set(self.ablations):
                raise ValueError("cannot ablate both semantic and color features of a conditional stage")

    @property
    def role_spec(self) -> RoleSpec:
        return ROLES[self.role]

    @property
    def uses_timing(self) -> bool:
        return self.role_spec.timing and "motion" not in self.ablations

    @property
    def uses_controller(self) -> bool:
        return self.role_spec.memory == "controller" and self.conditional

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embed"] = dict(self.embed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(role=d["role"], net=TransformerConfig(**d["net"]), embed=tuple(d["embed"].items()),
                   conditional=d["conditional"], ablations=tuple(d["ablations"]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 2
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    target_accuracy: Optional[float] = None  # stop early once reached
    checkpoint_dir: Optional[str] = None
    keep_checkpoints: int = 0  # newest epoch checkpoints to keep; 0 keeps all


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_p: float = 0.9
    greedy: bool = False


# ---------------------------------------------------------------------------
# data


@dataclass
class PieceData:
    """One training piece: quantized score, its annotations and optional video features."""

    score: Score
    chords: list[ChordSymbol]
    split: TrackSplit
    bundle: Optional[FeatureBundle] = None

    @property
    def n_bars(self) -> int:
        return len(self.chords) // 4

    @property
    def tempo_bpm(self) -> float:
        return self.score.tempo_bpm


def prepare_piece(score: Score, bundle: Optional[FeatureBundle] = None) -> PieceData:
    if not score.is_four_four:
        raise ValueError("unsupported meter")
    q = quantize(score, 4)
    return PieceData(q, extract_chords(q), skyline_split(q), bundle)


@dataclass
class Example:
    decoder: list[tk.CompoundToken]
    encoder: Optional[list[tk.CompoundToken]]
    semantic: Optional[np.ndarray]
    color: Optional[np.ndarray]
    tempo_bpm: float
    n_bars: int


def stage_tokens(piece: PieceData, role: str) -> tuple[list, Optional[list]]:
    """(decoder target tokens, encoder condition tokens) for one piece."""
    n = piece.n_bars
    if role == "chord":
        return tk.encode_chord_stage(piece.chords, n), None
    if role == "melody":
        return tk.encode_note_stage(piece.split, piece.chords, "melody"), tk.encode_chord_stage(piece.chords, n)
    if role == "accomp":
        cond = tk.encode_merged_condition(piece.chords, piece.split.melody, n)
        return tk.encode_note_stage(piece.split, piece.chords, "accomp"), cond
    if role == "video2music":
        return tk.encode_notes(piece.score, n), None
    if role == "chord2music":
        return tk.encode_notes(piece.score, n), tk.encode_chord_stage(piece.chords, n)
    raise ValueError(role)


def make_example(piece: PieceData, cfg: StageConfig) -> Example:
    dec, enc = stage_tokens(piece, cfg.role)
    semantic = color = None
    if cfg.uses_controller:
        if piece.bundle is None:
            raise ValueError("conditional stage needs video features for every piece")
        semantic, color = _controller_inputs(piece.bundle, cfg.ablations)
    tempo = FIXED_TEMPO if "motion" in cfg.ablations else piece.tempo_bpm
    return Example(dec, enc, semantic, color, tempo, max(piece.n_bars, 1))


def _controller_inputs(bundle: FeatureBundle, ablations) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    semantic = None if "semantic" in ablations else bundle.semantic
    color = None if "color" in ablations else bundle.color
    if semantic is not None and len(semantic) == 0:
        semantic = None
    if color is not None and len(color) == 0:
        color = None
    if semantic is None and color is None:
        raise ValueError("no semantic or color features available for the controller")
    return semantic, color


def _pad_stack(arrays: Sequence[np.ndarray], dtype=torch.long) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad along axis 0; returns (tensor, pad_mask) with pad_mask True at padding."""
    n = max(len(a) for a in arrays)
    shape = (len(arrays), n) + tuple(arrays[0].shape[1:])
    out = torch.zeros(shape, dtype=dtype)
    pad = torch.ones(len(arrays), n, dtype=torch.bool)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = torch.as_tensor(np.asarray(a), dtype=dtype)
        pad[i, : len(a)] = False
    return out, pad


def collate(examples: Sequence[Example], cfg: StageConfig) -> dict:
    role = cfg.role_spec
    batch: dict = {}
    dec_ids, dec_bars, dec_beats, timing = [], [], [], []
    for ex in examples:
        ids = tk.to_ids(ex.decoder, role.decoder_attrs)
        bars, beats = tk.positions(ex.decoder)
        dec_ids.append(ids)
        dec_bars.append(bars)
        dec_beats.append(beats)
        if cfg.uses_timing:
            timing.append(timing_matrix(bars, ex.n_bars))
    batch["ids"], batch["pad"] = _pad_stack(dec_ids)
    batch["bars"], _ = _pad_stack(dec_bars)
    batch["beats"], _ = _pad_stack(dec_beats)
    if cfg.uses_timing:
        batch["timing"], _ = _pad_stack(timing, torch.float32)
    batch["tempo"] = torch.tensor([tk.tempo_bin(ex.tempo_bpm) for ex in examples], dtype=torch.long)

    if role.memory == "encoder":
        ids = [tk.to_ids(ex.encoder, role.encoder_attrs) for ex in examples]
        batch["enc_ids"], batch["enc_pad"] = _pad_stack(ids)
        batch["enc_chroma"], _ = _pad_stack([tk.chroma_matrix(ex.encoder) for ex in examples], torch.float32)
        batch["enc_bars"], _ = _pad_stack([tk.positions(ex.encoder)[0] for ex in examples])
        batch["enc_beats"], _ = _pad_stack([tk.positions(ex.encoder)[1] for ex in examples])
    if cfg.uses_controller:
        if examples[0].semantic is not None:
            batch["semantic"], batch["semantic_pad"] = _pad_stack([ex.semantic for ex in examples], torch.float32)
        if examples[0].color is not None:
            batch["color"], batch["color_pad"] = _pad_stack([ex.color for ex in examples], torch.float32)
    return batch


def _shift(batch: dict) -> tuple[dict, dict]:
    """Teacher forcing: inputs are tokens[:-1], targets tokens[1:]."""
    inputs = dict(batch)
    for key in ("ids", "pad", "bars", "beats", "timing"):
        if key in batch:
            inputs[key] = batch[key][:, :-1]
    targets = batch["ids"][:, 1:]
    return inputs, targets


# ---------------------------------------------------------------------------
# networks


class CompoundEmbedding(nn.Module):
    """Concatenate per-attribute embeddings (+ optional chroma projection) and project to hidden."""

    def __init__(self, attrs: Sequence[str], sizes: dict[str, int], hidden: int, chroma: bool = False):
        super().__init__()
        self.attrs = tuple(attrs)
        self.tables = nn.ModuleDict({f"attr_{a}": nn.Embedding(len(tk.VOCAB[a]), sizes[a]) for a in self.attrs})
        width = sum(sizes[a] for a in self.attrs)
        self.chroma = nn.Linear(12, sizes["chroma"]) if chroma else None
        if chroma:
            width += sizes["chroma"]
        self.proj = nn.Linear(width, hidden)

    def forward(self, ids: torch.Tensor, chroma: Optional[torch.Tensor] = None) -> torch.Tensor:
        parts = [self.tables[f"attr_{a}"](ids[..., i]) for i, a in enumerate(self.attrs)]
        if self.chroma is not None:
            parts.append(self.chroma(chroma))
        return self.proj(torch.cat(parts, dim=-1))


class Controller(nn.Module):
    """Semantic and colour encoders, modality tags, then a fusion encoder."""

    def __init__(self, cfg: TransformerConfig, use_semantic: bool = True, use_color: bool = True):
        super().__init__()
        h, n = cfg.hidden, cfg.controller_layers
        self.semantic_in = nn.Linear(SEMANTIC_DIM, h) if use_semantic else None
        self.semantic_enc = Encoder(cfg, n) if use_semantic else None
        self.color_in = nn.Linear(COLOR_DIM, h) if use_color else None
        self.color_enc = Encoder(cfg, n) if use_color else None
        self.modality = nn.Embedding(2, h)
        self.fusion = Encoder(cfg, n)
        self.hidden = h

    def _branch(self, x, pad, proj, enc, tag):
        n = x.shape[1]
        y = proj(x) + nnkit.sinusoidal_positions(n, self.hidden).to(x.dtype)
        y = enc(y, _key_mask(pad, n))
        return y + self.modality.weight[tag]

    def forward(self, semantic=None, semantic_pad=None, color=None, color_pad=None):
        parts, pads = [], []
        if self.semantic_enc is not None and semantic is not None:
            parts.append(self._branch(semantic, semantic_pad, self.semantic_in, self.semantic_enc, 0))
            pads.append(semantic_pad)
        if self.color_enc is not None and color is not None:
            parts.append(self._branch(color, color_pad, self.color_in, self.color_enc, 1))
            pads.append(color_pad)
        if not parts:
            raise ValueError("controller received no features")
        x = torch.cat(parts, dim=1)
        pad = torch.cat(pads, dim=1)
        return self.fusion(x, _key_mask(pad, x.shape[1])), pad


def _key_mask(pad: torch.Tensor, n_query: int) -> torch.Tensor:
    """(B, Lq, Lk) mask allowing every non-padded key."""
    return (~pad).unsqueeze(1).expand(pad.shape[0], n_query, pad.shape[1])


class StageNet(nn.Module):
    def __init__(self, cfg: StageConfig):
        super().__init__()
        self.cfg = cfg
        role, net, sizes = cfg.role_spec, cfg.net, dict(cfg.embed)
        h = net.hidden
        self.embed = CompoundEmbedding(role.decoder_attrs, sizes, h)
        self.bar_emb = nn.Embedding(MAX_BARS, h)
        self.beat_emb = nn.Embedding(4, h)
        self.tempo_emb = nn.Embedding(tk.N_TEMPO_BINS, h)
        self.timing = nn.Linear(TIMING_DIM, h) if cfg.uses_timing else None
        self.controller = None
        self.encoder = None
        if cfg.uses_controller:
            self.controller = Controller(net, "semantic" not in cfg.ablations, "color" not in cfg.ablations)
        if role.memory == "encoder":
            self.enc_embed = CompoundEmbedding(role.encoder_attrs, sizes, h, chroma=True)
            self.encoder = Encoder(net, net.encoder_layers)
        cross = self.controller is not None or self.encoder is not None
        self.decoder = Decoder(net, net.decoder_layers, cross=cross)
        self.heads = nn.ModuleDict({f"attr_{a}": nn.Linear(h, len(tk.VOCAB[a])) for a in role.decoder_attrs})
        self.drop = nn.Dropout(net.dropout)

    # -- conditioning
    def condition(self, batch: dict) -> tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        """Encoder/controller memory and its padding mask (None for unconditional stages)."""
        if self.controller is not None:
            return self.controller(batch.get("semantic"), batch.get("semantic_pad"),
                                   batch.get("color"), batch.get("color_pad"))
        if self.encoder is not None:
            ids = batch["enc_ids"]
            n = ids.shape[1]
            x = self.enc_embed(ids, batch["enc_chroma"])
            x = x + self._positional(batch["enc_bars"], batch["enc_beats"], n)
            return self.encoder(self.drop(x), _key_mask(batch["enc_pad"], n)), batch["enc_pad"]
        return None, None

    def _positional(self, bars, beats, n):
        pe = nnkit.sinusoidal_positions(n, self.cfg.net.hidden).to(torch.float32)
        return self.bar_emb(bars.clamp(max=MAX_BARS - 1)) + self.beat_emb(beats) + pe

    def cross_mask(self, batch: dict, memory_pad: torch.Tensor) -> torch.Tensor:
        n = batch["ids"].shape[1]
        allowed = _key_mask(memory_pad, n)
        if self.encoder is None:
            return allowed
        mask = nnkit.bar_cross_mask(batch["bars"], batch["enc_bars"]) & allowed
        # padded decoder rows may look anywhere; real rows keep the bar window
        empty = ~mask.any(-1, keepdim=True) & batch["pad"].unsqueeze(-1)
        return torch.where(empty, allowed, mask)

    def decode(self, batch: dict, memory=None, memory_pad=None) -> dict[str, torch.Tensor]:
        ids = batch["ids"]
        n = ids.shape[1]
        x = self.embed(ids) + self._positional(batch["bars"], batch["beats"], n)
        x = x + self.tempo_emb(batch["tempo"]).unsqueeze(1)
        if self.timing is not None:
            x = x + self.timing(batch["timing"])
        self_mask = nnkit.causal_mask(n).unsqueeze(0) & ~batch["pad"].unsqueeze(1)
        cross = self.cross_mask(batch, memory_pad) if memory is not None else None
        hdn = self.decoder(self.drop(x), self_mask, memory, cross)
        return {a: self.heads[f"attr_{a}"](hdn) for a in self.cfg.role_spec.decoder_attrs}

    def forward(self, batch: dict) -> dict[str, torch.Tensor]:
        memory, pad = self.condition(batch)
        return self.decode(batch, memory, pad)


# ---------------------------------------------------------------------------
# stage models


@dataclass
class StageModel:
    config: StageConfig
    net: StageNet
    history: dict = field(default_factory=dict)
    epoch: int = 0

    @property
    def role(self) -> str:
        return self.config.role

    @property
    def vocab(self) -> tk.StageVocab:
        return tk.StageVocab("chord" if self.role == "chord" else "melody")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for k, v in sorted(nnkit.state_to_numpy(self.net).items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def save(self, path, optimizer: Optional[torch.optim.Optimizer] = None) -> None:
        tensors = {f"param.{k}": v for k, v in nnkit.state_to_numpy(self.net).items()}
        header = {
            "config": self.config.to_dict(),
            "vocab": self.vocab.digest(),
            "epoch": self.epoch,
            "history": self.history,
        }
        if optimizer is not None:
            state = optimizer.state_dict()
            header["optimizer"] = {"param_groups": state["param_groups"]}
            for idx, st in state["state"].items():
                for key, val in st.items():
                    tensors[f"adam.{idx}.{key}"] = val.detach().cpu().numpy()
        nnkit.save_checkpoint(path, header, tensors)

    @classmethod
    def load(cls, path) -> tuple["StageModel", dict]:
        """Returns the model and the raw optimizer state (empty if none saved)."""
        header, tensors = nnkit.load_checkpoint(path)
        cfg = StageConfig.from_dict(header["config"])
        net = StageNet(cfg)
        nnkit.load_numpy_state(net, {k[6:]: v for k, v in tensors.items() if k.startswith("param.")})
        opt_state: dict = {}
        if "optimizer" in header:
            state: dict = {}
            for k, v in tensors.items():
                if k.startswith("adam."):
                    _, idx, key = k.split(".", 2)
                    state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(v))
            opt_state = {"state": state, "param_groups": header["optimizer"]["param_groups"]}
        return cls(cfg, net, header.get("history", {}), header.get("epoch", 0)), opt_state


def build_stage(cfg: StageConfig, seed: int = 0) -> StageModel:
    torch.manual_seed(seed)
    return StageModel(cfg, StageNet(cfg))


def _loss_and_acc(net: StageNet, batch: dict) -> tuple[torch.Tensor, int, int]:
    inputs, targets = _shift(batch)
    logits = net(inputs)
    attrs = net.cfg.role_spec.decoder_attrs
    tg = {a: targets[..., i] for i, a in enumerate(attrs)}
    loss = nnkit.multihead_ce_loss(logits, tg)
    with torch.no_grad():
        valid = targets[..., 0] != 0
        ok = torch.ones_like(valid)
        for i, a in enumerate(attrs):
            t = targets[..., i]
            ok &= (logits[a].argmax(-1) == t) | (t == 0)
        correct = int((ok & valid).sum())
    return loss, correct, int(valid.sum())


def evaluate_stage(model: StageModel, examples: Sequence[Example], batch_size: int = 8) -> tuple[float, float]:
    """Teacher-forced (mean loss, next-token accuracy). A token counts as correct
    only if every applicable attribute's argmax matches."""
    net = model.net
    was_training = net.training
    net.eval()
    total_loss, correct, count, batches = 0.0, 0, 0, 0
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            loss, c, n = _loss_and_acc(net, collate(examples[i:i + batch_size], model.config))
            total_loss += float(loss)
            correct += c
            count += n
            batches += 1
    net.train(was_training)
    return total_loss / max(batches, 1), correct / max(count, 1)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train_stage(role: str, dataset: Sequence[PieceData], config: TrainConfig = TrainConfig(),
                stage: Optional[StageConfig] = None, validation: Sequence[PieceData] = (),
                resume: Optional[str] = None) -> StageModel:
    """Teacher-forced training of one stage with Adam.

    Each epoch reseeds shuffling and dropout from (seed, epoch), so a run
    resumed from an epoch checkpoint follows the same trajectory. The
    returned model is the best epoch by validation loss (training loss
    when no validation set is given).
    """
    if not dataset:
        raise ValueError("empty dataset")
    stage = stage or StageConfig(role)
    if stage.role != role:
        raise ValueError(f"stage config is for {stage.role!r}, not {role!r}")
    examples = [make_example(p, stage) for p in dataset]
    val_examples = [make_example(p, stage) for p in validation]

    if resume:
        model, opt_state = StageModel.load(resume)
        if model.config != stage:
            raise ValueError("checkpoint config does not match requested stage config")
    else:
        model, opt_state = build_stage(stage, config.seed), {}
    net = model.net
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas)
    if opt_state:
        opt.load_state_dict(opt_state)
        for group in opt.param_groups:
            group["lr"] = config.lr

    hist = model.history or {"train_loss": [], "val_loss": [], "train_acc": []}
    best_state, best_loss, best_epoch = None, math.inf, -1
    if hist["train_loss"]:
        scores = hist["val_loss"] if val_examples else hist["train_loss"]
        best_epoch = int(np.argmin(scores))
        best_loss = scores[best_epoch]
    for epoch in range(model.epoch, config.epochs):
        rng = np.random.default_rng(_epoch_seed(config.seed, epoch))
        torch.manual_seed(_epoch_seed(config.seed, epoch))
        order = rng.permutation(len(examples))
        net.train()
        losses = []
        for i in range(0, len(order), config.batch_size):
            batch = collate([examples[j] for j in order[i:i + config.batch_size]], stage)
            loss, _, _ = _loss_and_acc(net, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        hist["train_loss"].append(float(np.mean(losses)))
        if val_examples:
            hist["val_loss"].append(evaluate_stage(model, val_examples)[0])
        score = hist["val_loss"][-1] if val_examples else hist["train_loss"][-1]
        model.epoch = epoch + 1
        if config.target_accuracy is not None or config.checkpoint_dir:
            acc = evaluate_stage(model, examples)[1]
            hist["train_acc"].append(acc)
        if score < best_loss:
            best_loss, best_epoch = score, epoch
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        model.history = hist
        if config.checkpoint_dir:
            os.makedirs(config.checkpoint_dir, exist_ok=True)
            model.save(os.path.join(config.checkpoint_dir, f"{role}_epoch{epoch + 1:04d}.ckpt"), opt)
            if config.keep_checkpoints:
                stale = os.path.join(config.checkpoint_dir, f"{role}_epoch{epoch + 1 - config.keep_checkpoints:04d}.ckpt")
                if os.path.exists(stale):
                    os.remove(stale)
        if config.target_accuracy is not None and hist["train_acc"][-1] >= config.target_accuracy:
            log.info("%s reached accuracy %.3f at epoch %d", role, hist["train_acc"][-1], epoch + 1)
            break
    if best_state is not None and config.target_accuracy is None:
        net.load_state_dict(best_state)
    hist["best_epoch"] = best_epoch
    net.eval()
    return model


# ---------------------------------------------------------------------------
# generation


class GrammarConstraint(nnkit.Constraint):
    def __init__(self, grammar: tk.Grammar, attrs: Sequence[str]):
        self.grammar = grammar
        self.attrs = set(attrs)

    def allowed(self, attr: str, partial: dict[str, int]) -> Optional[list[int]]:
        if attr == "type":
            return [tk.token_id("type", t) for t in self.grammar.allowed_types()]
        type_ = tk.token_value("type", partial["type"])
        values = {a: tk.token_value(a, i) for a, i in partial.items() if a != "type" and i}
        allowed = self.grammar.allowed_values(type_, attr, values)
        return None if allowed is None else [tk.token_id(attr, v) for v in allowed]

    def attributes(self, type_id: int) -> Sequence[str]:
        names = self.grammar.attributes_for(tk.token_value("type", type_id))
        return [a for a in names if a in self.attrs]


def _single_batch(model: StageModel, tokens: list, tempo: float, n_bars: int, cond: dict) -> dict:
    ex = Example(tokens, cond.get("encoder"), cond.get("semantic"), cond.get("color"), tempo, n_bars)
    return collate([ex], model.config)


@torch.no_grad()
def decode_stage(model: StageModel, n_bars: int, tempo: float, sampling: SamplingParams,
                 rng: np.random.Generator, encoder_tokens=None, bundle: Optional[FeatureBundle] = None) -> list:
    """Autoregressively sample one grammar-valid token sequence."""
    net = model.net.eval()
    role = model.config.role_spec
    cond: dict = {"encoder": encoder_tokens}
    if model.config.uses_controller:
        if bundle is None:
            raise ValueError(f"{model.role} stage needs a feature bundle")
        cond["semantic"], cond["color"] = _controller_inputs(bundle, model.config.ablations)
    elif role.memory == "encoder" and encoder_tokens is None:
        raise ValueError(f"{model.role} stage needs condition tokens")

    grammar = tk.Grammar(role.grammar, n_bars)
    constraint = GrammarConstraint(grammar, role.decoder_attrs)
    tokens = [grammar.push(tk.bos())]
    first = _single_batch(model, tokens, tempo, n_bars, cond)
    memory, pad = net.condition(first)
    cap = LENGTH_CAP[model.role]
    while not grammar.finished:
        if len(tokens) >= cap:
            warnings.warn(f"{model.role} stage hit the {cap}-token cap; truncating")
            break
        batch = _single_batch(model, tokens, tempo, n_bars, cond)
        logits = net.decode(batch, memory, pad)
        last = {a: lg[0, -1].numpy() for a, lg in logits.items()}
        ids = nnkit.sample_token(last, sampling.temperature, sampling.top_p, rng, constraint, sampling.greedy)
        tok = model.vocab.decode([ids[a] for a in role.decoder_attrs])
        tokens.append(grammar.push(tok))
    return tokens


def clip_to_bars(score: Score, n_bars: int) -> Score:
    end = n_bars * 4 * score.ticks_per_quarter
    notes = [replace(n, duration=min(n.duration, end - n.onset)) for n in score.notes if n.onset < end]
    return score.with_notes(notes)


@dataclass
class Generation:
    score: Score
    chords: list[ChordSymbol]
    tokens: dict[str, list]
    provenance: dict


def _check_models(models: dict, needed: Iterable[str], ablations: tuple) -> None:
    for role in needed:
        if role not in models:
            raise ValueError(f"missing {role} model")
        got = models[role].config.ablations
        if got != ablations:
            raise ValueError(f"{role} model trained with ablations {got}, requested {ablations}")


def generate(models: dict[str, StageModel], bundle: Optional[FeatureBundle], n_bars: Optional[int] = None,
             sampling: SamplingParams = SamplingParams(), mode: str = "vmusprod",
             ablations: Sequence[str] = (), seed: int = 0) -> Generation:
    """Run the staged pipeline and return the merged piano score.

    ``mode`` selects the full three-stage model or one of the collapsed
    variants; ``ablations`` drop controller inputs (semantic/color) or the
    motion-derived tempo and timing.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    ablations = tuple(sorted(set(ablations)))
    unconditional = "chord" in models and not models["chord"].config.conditional
    if bundle is None and not unconditional:
        raise ValueError("a feature bundle is required unless the chord stage is unconditional")
    tempo = FIXED_TEMPO if ("motion" in ablations or bundle is None) else bundle.tempo_bpm
    if n_bars is None:
        if bundle is None:
            raise ValueError("n_bars is required without a feature bundle")
        n_bars = math.ceil(bundle.duration_sec * tempo / 60 / 4)
    if n_bars < 1:
        raise ValueError("n_bars must be >= 1")
    rng = np.random.default_rng(seed)
    tokens: dict[str, list] = {}
    chords: list[ChordSymbol] = []

    if mode == "video2music":
        _check_models(models, ["video2music"], ablations)
        tokens["music"] = decode_stage(models["video2music"], n_bars, tempo, sampling, rng, bundle=bundle)
        score = tk.decode_tokens(tokens["music"], tempo)
    else:
        _check_models(models, ["chord"], ablations)
        tokens["chord"] = decode_stage(models["chord"], n_bars, tempo, sampling, rng, bundle=bundle)
        chords = tk.decode_chord_stage(tokens["chord"])
        chord_cond = tk.encode_chord_stage(chords, n_bars)
        if mode == "video2chord2music":
            _check_models(models, ["chord2music"], ablations)
            tokens["music"] = decode_stage(models["chord2music"], n_bars, tempo, sampling, rng, chord_cond)
            score = tk.decode_tokens(tokens["music"], tempo)
        else:
            _check_models(models, ["melody", "accomp"], ablations)
            tokens["melody"] = decode_stage(models["melody"], n_bars, tempo, sampling, rng, chord_cond)
            melody = clip_to_bars(tk.decode_tokens(tokens["melody"], tempo), n_bars)
            merged_cond = tk.encode_merged_condition(chords, melody, n_bars)
            tokens["accomp"] = decode_stage(models["accomp"], n_bars, tempo, sampling, rng, merged_cond)
            accomp = tk.decode_tokens(tokens["accomp"], tempo)
            score = tk.merge_tracks(melody, accomp)
    score = clip_to_bars(score, n_bars)
    provenance = {
        "mode": mode,
        "ablations": list(ablations),
        "unconditional": unconditional,
        "seed": seed,
        "n_bars": n_bars,
        "tempo_bpm": tempo,
        "sampling": asdict(sampling),
        "checkpoints": {role: m.digest() for role, m in sorted(models.items())},
    }
    return Generation(score, chords, tokens, provenance)


def generate_unconditional(models: dict[str, StageModel], n_bars: int,
                           sampling: SamplingParams = SamplingParams(), seed: int = 0) -> Generation:
    if models["chord"].config.conditional:
        raise ValueError("unconditional generation needs a chord stage trained without cross-attention")
    return generate(models, None, n_bars, sampling, "vmusprod", (), seed)


@dataclass
class ControllerOutput:
    style_memory: np.ndarray
    tempo_bpm: float
    timing: np.ndarray


@torch.no_grad()
def fuse_controller(model: StageModel, bundle: FeatureBundle, n_bars: Optional[int] = None) -> ControllerOutput:
    """Style memory of one bundle as seen by a controller-conditioned stage."""
    if model.net.controller is None:
        raise ValueError(f"{model.role} stage has no video controller")
    cfg = model.config
    semantic, color = _controller_inputs(bundle, cfg.ablations)
    batch = {}
    if semantic is not None:
        batch["semantic"], batch["semantic_pad"] = _pad_stack([semantic], torch.float32)
    if color is not None:
        batch["color"], batch["color_pad"] = _pad_stack([color], torch.float32)
    model.net.eval()
    memory, _ = model.net.controller(batch.get("semantic"), batch.get("semantic_pad"),
                                     batch.get("color"), batch.get("color_pad"))
    tempo = FIXED_TEMPO if "motion" in cfg.ablations else bundle.tempo_bpm
    n_bars = n_bars or math.ceil(bundle.duration_sec * tempo / 240) or 1
    timing = np.zeros((0, TIMING_DIM)) if "motion" in cfg.ablations else timing_matrix(np.arange(n_bars), n_bars)
    return ControllerOutput(memory[0].numpy(), tempo, timing)
