"""Objective evaluation: symbolic music-quality metrics and the VMCP
video-music retrieval metric (dual segment encoders trained with InfoNCE,
then P@K / average rank over a candidate pool).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import nnkit, tensorfile
from .midi import Score
from .nnkit import Encoder, TransformerConfig
from .video import FeatureBundle

MAJOR_STEPS = (0, 2, 4, 5, 7, 9, 11)
MINOR_STEPS = (0, 2, 3, 5, 7, 8, 10)  # natural minor


def scale_sets() -> list[frozenset[int]]:
    """The 24 major/natural-minor pitch-class sets, majors first."""
    return [frozenset((t + s) % 12 for s in steps) for steps in (MAJOR_STEPS, MINOR_STEPS) for t in range(12)]


@dataclass
class MetricReport:
    # None marks "not applicable" (empty score, or a single onset for ioi)
    sc: Optional[float] = None
    pe: Optional[float] = None
    pce: Optional[float] = None
    ebr: Optional[float] = None
    ioi: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _entropy_bits(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def quality_metrics(score: Score) -> MetricReport:
    """SC, PE, PCE (count-based), EBR over beats 0..ceil(end/tpq), IOI in seconds."""
    notes = score.notes
    if not notes:
        return MetricReport()
    pitches = np.array([n.pitch for n in notes])
    pcs = pitches % 12
    sc = max(float(np.isin(pcs, sorted(s)).mean()) for s in scale_sets())
    pe = _entropy_bits(np.bincount(pitches, minlength=128).astype(float))
    pce = _entropy_bits(np.bincount(pcs, minlength=12).astype(float))

    tpq = score.ticks_per_quarter
    n_beats = max(1, math.ceil(score.end_tick / tpq))
    onsets = np.array(sorted({n.onset for n in notes}))
    hit = np.zeros(n_beats, dtype=bool)
    hit[np.minimum(onsets // tpq, n_beats - 1)] = True
    ebr = float(1.0 - hit.mean())
    ioi = float(np.diff(onsets).mean() * score.seconds_per_tick()) if len(onsets) > 1 else None
    return MetricReport(sc, pe, pce, ebr, ioi)


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    """Field-wise mean that skips NA entries."""
    out = {}
    for name in ("sc", "pe", "pce", "ebr", "ioi"):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        out[name] = float(np.mean(vals)) if vals else None
    return MetricReport(**out)


# ---------------------------------------------------------------------------
# music descriptors for VMCP

MUSIC_FEATURE_DIM = 16


def music_features(score: Score) -> np.ndarray:
    """Per-beat descriptor: 12 pitch-class sounding fractions + 4 sixteenth onset counts."""
    tpq = score.ticks_per_quarter
    n_beats = max(1, math.ceil(score.end_tick / tpq))
    out = np.zeros((n_beats, MUSIC_FEATURE_DIM))
    step = tpq / 4
    for n in score.notes:
        first, last = n.onset // tpq, (n.offset - 1) // tpq
        for b in range(first, min(last, n_beats - 1) + 1):
            overlap = min(n.offset, (b + 1) * tpq) - max(n.onset, b * tpq)
            out[b, n.pitch % 12] += overlap / tpq
        beat, rem = divmod(n.onset, tpq)
        out[beat, 12 + min(int(rem // step), 3)] += 1
    return out


def video_features(bundle: FeatureBundle) -> np.ndarray:
    """VMCP video-side sequence: semantic tokens when present, else colour histograms."""
    if len(bundle.semantic):
        return np.asarray(bundle.semantic, dtype=np.float64)
    if len(bundle.color):
        return np.asarray(bundle.color, dtype=np.float64)
    raise ValueError("bundle has neither semantic nor color features")


def load_music_features(path) -> np.ndarray:
    """Externally computed (T, D) music features stored as VMFT."""
    arr = tensorfile.load(path)
    if arr.ndim != 2:
        raise ValueError(f"music features: expected 2-D array, found shape {arr.shape}")
    return arr.astype(np.float64)


# ---------------------------------------------------------------------------
# encoders


@dataclass(frozen=True)
class VMCPConfig:
    video_dim: int = 512
    music_dim: int = MUSIC_FEATURE_DIM
    embed_dim: int = 128
    segments: int = 4
    net: TransformerConfig = field(default_factory=lambda: TransformerConfig(
        hidden=64, ff=128, heads=4, dropout=0.0, encoder_layers=1))
    tau_init: float = 0.07
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VMCPConfig":
        d = dict(d)
        d["net"] = TransformerConfig(**d["net"])
        return cls(**d)


class SideEncoder(nn.Module):
    """Segment feature sequence -> unit-norm embedding."""

    def __init__(self, in_dim: int, cfg: TransformerConfig, embed_dim: int):
        super().__init__()
        self.inp = nn.Linear(in_dim, cfg.hidden)
        self.encoder = Encoder(cfg, cfg.encoder_layers)
        self.out = nn.Linear(cfg.hidden, embed_dim)
        self.hidden = cfg.hidden

    def forward(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        n = x.shape[1]
        h = self.inp(x) + nnkit.sinusoidal_positions(n, self.hidden).to(x.dtype)
        mask = (~pad).unsqueeze(1).expand(-1, n, -1)
        h = self.encoder(h, mask)
        keep = (~pad).unsqueeze(-1).to(h.dtype)
        pooled = (h * keep).sum(1) / keep.sum(1)
        return F.normalize(self.out(pooled), dim=-1)


class VMCPModel(nn.Module):
    def __init__(self, cfg: VMCPConfig = VMCPConfig()):
        super().__init__()
        self.cfg = cfg
        self.video = SideEncoder(cfg.video_dim, cfg.net, cfg.embed_dim)
        self.music = SideEncoder(cfg.music_dim, cfg.net, cfg.embed_dim)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def save(self, path) -> None:
        nnkit.save_checkpoint(path, {"kind": "vmcp", "config": self.cfg.to_dict()}, nnkit.state_to_numpy(self))

    @classmethod
    def load(cls, path) -> "VMCPModel":
        header, tensors = nnkit.load_checkpoint(path)
        if header.get("kind") != "vmcp":
            raise ValueError("not a VMCP checkpoint")
        model = cls(VMCPConfig.from_dict(header["config"]))
        nnkit.load_numpy_state(model, tensors)
        return model.eval()


def split_segments(features, segments: int) -> list[np.ndarray]:
    """Split a (T, D) sequence into ``segments`` near-equal chunks, or pass through a pre-split list."""
    if isinstance(features, (list, tuple)):
        return [np.asarray(s, dtype=np.float64) for s in features]
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected (T, D) features, got shape {arr.shape}")
    if len(arr) < segments:
        raise ValueError(f"sequence of length {len(arr)} cannot be split into {segments} segments")
    return np.array_split(arr, segments)


def _pad_segments(segs: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    n = max(len(s) for s in segs)
    x = torch.zeros(len(segs), n, segs[0].shape[1], dtype=torch.float32)
    pad = torch.ones(len(segs), n, dtype=torch.bool)
    for i, s in enumerate(segs):
        x[i, : len(s)] = torch.as_tensor(s, dtype=torch.float32)
        pad[i, : len(s)] = False
    return x, pad


def encode_side(encoder: SideEncoder, pieces: Sequence, segments: int) -> torch.Tensor:
    """(N, L, d) embeddings for N pieces."""
    segs = [split_segments(p, segments) for p in pieces]
    lengths = {len(s) for s in segs}
    if len(lengths) != 1:
        raise ValueError(f"pieces have differing segment counts {sorted(lengths)}")
    flat = [s for piece in segs for s in piece]
    x, pad = _pad_segments(flat)
    return encoder(x, pad).reshape(len(pieces), lengths.pop(), -1)


@dataclass
class SegmentEmbeddings:
    video: np.ndarray  # (L, d)
    music: np.ndarray  # (L, d)


@torch.no_grad()
def embed_pair(video, music, model: VMCPModel) -> SegmentEmbeddings:
    L = model.cfg.segments
    v_segs, m_segs = split_segments(video, L), split_segments(music, L)
    if len(v_segs) != len(m_segs):
        raise ValueError(f"segment count mismatch: video {len(v_segs)} vs music {len(m_segs)}")
    model.eval()
    v = encode_side(model.video, [v_segs], L)[0]
    m = encode_side(model.music, [m_segs], L)[0]
    return SegmentEmbeddings(v.numpy().astype(np.float64), m.numpy().astype(np.float64))


def infonce_loss(video, music, tau) -> torch.Tensor:
    """Symmetric segment-level InfoNCE over an (N, L, d) batch.

    Every segment v_{i,l} is an anchor whose positive is m_{i,l} and whose
    candidates are all N*L music segments (and vice versa). Each direction
    is averaged over its N*L anchors; the result is the mean of both, so a
    batch of identical embeddings scores exactly ln(N*L).
    """
    v = torch.as_tensor(video)
    m = torch.as_tensor(music, dtype=v.dtype)
    if v.shape != m.shape or v.ndim != 3:
        raise ValueError(f"expected matching (N, L, d) arrays, got {tuple(v.shape)} and {tuple(m.shape)}")
    n = v.shape[0] * v.shape[1]
    if n < 2:
        raise ValueError("need at least two segments in total")
    tau = torch.as_tensor(tau, dtype=v.dtype)
    if not bool(tau > 0):
        raise ValueError("tau must be > 0")
    vf, mf = v.reshape(n, -1), m.reshape(n, -1)
    sim = vf @ mf.T / tau
    target = torch.arange(n)
    return 0.5 * (F.cross_entropy(sim, target) + F.cross_entropy(sim.T, target))


@dataclass
class RetrievalReport:
    p_at: dict[int, float]
    average_rank: float
    ranks: list[int]
    similarity_matrix: np.ndarray

    def to_dict(self, include_matrix: bool = True) -> dict:
        d = {"p_at": {str(k): v for k, v in self.p_at.items()}, "average_rank": self.average_rank,
             "ranks": self.ranks}
        if include_matrix:
            d["similarity_matrix"] = self.similarity_matrix.tolist()
        return d

    def to_json(self, include_matrix: bool = True) -> str:
        return json.dumps(self.to_dict(include_matrix), indent=2, sort_keys=True)


def rank_retrieval(similarity: np.ndarray, truth: Sequence[int], ks: Sequence[int] = (5, 10, 20)) -> RetrievalReport:
    """Rank of the true candidate per query row; ties go to the lower candidate index."""
    sim = np.asarray(similarity, dtype=np.float64)
    if sim.ndim != 2:
        raise ValueError("similarity must be 2-D")
    n_cand = sim.shape[1]
    for k in ks:
        if n_cand < k:
            raise ValueError(f"{n_cand} candidates is fewer than K={k}")
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape != (sim.shape[0],):
        raise ValueError("one ground-truth index per query required")
    true_score = sim[np.arange(len(truth)), truth][:, None]
    idx = np.arange(n_cand)[None, :]
    ahead = (sim > true_score) | ((sim == true_score) & (idx < truth[:, None]))
    ranks = ahead.sum(axis=1) + 1
    p_at = {int(k): float((ranks <= k).mean()) for k in ks}
    return RetrievalReport(p_at, float(ranks.mean()), [int(r) for r in ranks], sim)


def pooled_cosine(music_emb: np.ndarray, video_emb: np.ndarray) -> np.ndarray:
    """(P, L, d) x (M, L, d) -> (P, M) cosine of segment-mean embeddings."""
    a = np.asarray(music_emb, dtype=np.float64).mean(axis=1)
    b = np.asarray(video_emb, dtype=np.float64).mean(axis=1)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def vmcp_from_embeddings(music_emb, video_emb, truth=None, ks=(5, 10, 20)) -> RetrievalReport:
    music_emb = np.asarray(music_emb)
    video_emb = np.asarray(video_emb)
    if truth is None:
        truth = np.arange(len(music_emb))
    return rank_retrieval(pooled_cosine(music_emb, video_emb), truth, ks)


@torch.no_grad()
def vmcp_eval(generated_music: Sequence, candidate_videos: Sequence, model: VMCPModel,
              truth: Optional[Sequence[int]] = None, ks: Sequence[int] = (5, 10, 20)) -> RetrievalReport:
    """Retrieve each generated piece's source video among the candidates.

    ``truth[i]`` is the candidate index of piece i's video (default: i).
    """
    if len(candidate_videos) < max(ks):
        raise ValueError(f"{len(candidate_videos)} candidates is fewer than K={max(ks)}")
    model.eval()
    L = model.cfg.segments
    m = encode_side(model.music, list(generated_music), L).numpy()
    v = encode_side(model.video, list(candidate_videos), L).numpy()
    return vmcp_from_embeddings(m, v, truth, ks)


# ---------------------------------------------------------------------------
# training


MIN_PAIRS = 16


def train_vmcp(pairs: Sequence[tuple], config: VMCPConfig = VMCPConfig()) -> tuple[VMCPModel, list[float]]:
    """Fit both encoders and the temperature with Adam on (video, music) pairs.

    Returns the model and the per-epoch mean loss.
    """
    if not pairs:
        raise ValueError("empty dataset")
    if len(pairs) < MIN_PAIRS:
        raise ValueError(f"need at least {MIN_PAIRS} pairs, got {len(pairs)}")
    torch.manual_seed(config.seed)
    model = VMCPModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999))
    videos = [split_segments(v, config.segments) for v, _ in pairs]
    musics = [split_segments(m, config.segments) for _, m in pairs]
    rng = np.random.default_rng(config.seed)
    curve = []
    for _ in range(config.epochs):
        model.train()
        order = rng.permutation(len(pairs))
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            if len(idx) * config.segments < 2:
                continue
            v = encode_side(model.video, [videos[j] for j in idx], config.segments)
            m = encode_side(model.music, [musics[j] for j in idx], config.segments)
            loss = infonce_loss(v, m, model.tau)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    return model.eval(), curve


def synthetic_pairs(n: int, seed: int = 0, video_dim: int = 32, music_dim: int = MUSIC_FEATURE_DIM,
                    length: int = 16, noise: float = 0.05, mapping_seed: int = 1234) -> list[tuple]:
    """Random video sequences paired with a fixed linear map of themselves (plus noise)."""
    w = np.random.default_rng(mapping_seed).normal(size=(video_dim, music_dim)) / math.sqrt(video_dim)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        v = rng.normal(size=(length, video_dim))
        m = v @ w + noise * rng.normal(size=(length, music_dim))
        out.append((v, m))
    return out
