"""Command-line entry points: annotate, tokenize, train, generate, evaluate,
analyze, plus a ``toy`` command that writes the synthetic demo corpus.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import metrics, musprod, tensorfile, tokenizer as tk
from .annotate import (QUALITY_NAMES, ChordSymbol, Tonality, detect_tonality, extract_chords,
                       reference_offset, skyline_split)
from .midi import Score, quantize, read_midi, write_midi
from .nnkit import PROFILES, TransformerConfig
from .video import SEMANTIC_RATE, FeatureBundle, extract_bundle, ingest_semantic, read_frames

log = logging.getLogger("vmusprod")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CONFIG_ENV = "VMUSPROD_CONFIG"
STAGES = ("chord", "melody", "accomp", "video2music", "chord2music", "vmcp")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

DEFAULTS: dict = {
    "profile": "desk",
    "seed": 0,
    "temperature": 1.0,
    "top_p": 0.9,
    "greedy": False,
    "mode": "vmusprod",
    "ablations": [],
    "unconditional": False,
    "n_bars": None,
    "m_min": None,
    "m_max": None,
    "epochs": 300,
    "lr": 1e-3,
    "batch_size": 2,
    "target_accuracy": None,
    "keep_checkpoints": 2,
    "vmcp_epochs": 60,
    "vmcp_lr": 1e-3,
    "vmcp_batch_size": 16,
    "segments": 4,
    "ks": [5, 10, 20],
    "bpm_bin": 5,
    "workers": 4,
}


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults < JSON file (``path`` or $VMUSPROD_CONFIG) < overrides."""
    cfg = dict(DEFAULTS)
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        _merge(cfg, data)
    _merge(cfg, overrides or {})
    if cfg["profile"] not in PROFILES:
        raise UsageError(f"unknown profile {cfg['profile']!r}")
    bad = set(cfg["ablations"]) - set(musprod.ABLATIONS)
    if bad:
        raise UsageError(f"unknown ablation(s) {sorted(bad)}")
    if cfg["mode"] not in musprod.MODES:
        raise UsageError(f"unknown mode {cfg['mode']!r}")
    return cfg


def _merge(cfg: dict, new: dict) -> None:
    for key, value in new.items():
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = value


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def net_config(cfg: dict) -> TransformerConfig:
    return PROFILES[cfg["profile"]]


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    id: str
    midi_path: str
    annotation_path: Optional[str] = None
    semantic_path: Optional[str] = None
    frames_path: Optional[str] = None
    genre: Optional[str] = None
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: str = "."

    @classmethod
    def load(cls, path: str, require: Sequence[str] = ("midi_path",)) -> "DatasetManifest":
        """Parse and validate; relative paths resolve against the manifest directory."""
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read manifest {path}: {e}") from None
        root = os.path.dirname(os.path.abspath(path))
        raw = data.get("entries") if isinstance(data, dict) else data
        if not isinstance(raw, list):
            raise DataError("manifest must be a list of entries or {\"entries\": [...]}")
        entries, seen = [], set()
        for i, item in enumerate(raw):
            if not isinstance(item, dict):
                raise DataError(f"manifest entry {i} is not an object")
            unknown = set(item) - set(ManifestEntry.__dataclass_fields__)
            if unknown:
                raise DataError(f"manifest entry {i}: unknown field(s) {sorted(unknown)}")
            if "id" not in item or "midi_path" not in item:
                raise DataError(f"manifest entry {i}: 'id' and 'midi_path' are required")
            e = ManifestEntry(**item)
            if e.id in seen:
                raise DataError(f"duplicate manifest id {e.id!r}")
            seen.add(e.id)
            if e.split not in ("train", "val", "test"):
                raise DataError(f"entry {e.id}: split must be train, val or test")
            for attr in ("midi_path", "annotation_path", "semantic_path", "frames_path"):
                p = getattr(e, attr)
                if p is not None:
                    p = p if os.path.isabs(p) else os.path.join(root, p)
                    setattr(e, attr, p)
                    if not os.path.exists(p):
                        raise DataError(f"entry {e.id}: {attr} {p} does not exist")
                elif attr in require:
                    raise DataError(f"entry {e.id}: {attr} is required")
            entries.append(e)
        return cls(entries, root)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


# ---------------------------------------------------------------------------
# persistence


def atomic_write(path: str, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode()
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def file_hash(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def write_provenance(path: str, command: str, cfg: dict, **extra) -> None:
    doc = {"command": command, "config_hash": config_hash(cfg), "seed": cfg["seed"], "config": cfg}
    doc.update(extra)
    atomic_write(path, dumps_json(doc))


# ---------------------------------------------------------------------------
# annotate


def annotation_document(score: Score, melody_path: str, accomp_path: str) -> dict:
    """The per-piece annotation record. ``score`` must already be quantized."""
    tonality = detect_tonality(score)
    chords = extract_chords(score)
    return {
        "tonality": {"tonic": tonality.tonic, "mode": tonality.mode},
        "tempo_bpm": score.tempo_bpm,
        "chords": [{"bar": c.bar_index, "beat": c.beat_index, "root": c.root, "quality": c.quality} for c in chords],
        "melody_midi_path": melody_path,
        "accomp_midi_path": accomp_path,
    }


def annotate_entry(entry: ManifestEntry, out_dir: str) -> str:
    score = quantize(read_midi(entry.midi_path))
    split = skyline_split(score)
    mel = os.path.join(out_dir, f"{entry.id}.melody.mid")
    acc = os.path.join(out_dir, f"{entry.id}.accomp.mid")
    doc = annotation_document(score, os.path.basename(mel), os.path.basename(acc))
    atomic_write(mel, write_midi(split.melody))
    atomic_write(acc, write_midi(split.accompaniment))
    path = os.path.join(out_dir, f"{entry.id}.json")
    atomic_write(path, dumps_json(doc))
    return path


def cmd_annotate(args, cfg) -> int:
    manifest = DatasetManifest.load(args.manifest)
    os.makedirs(args.out, exist_ok=True)

    def work(entry):
        try:
            return entry, annotate_entry(entry, args.out), None
        except Exception as e:  # per-file failures are reported and skipped
            return entry, None, e

    with ThreadPoolExecutor(max_workers=max(1, int(cfg["workers"]))) as pool:
        results = list(pool.map(work, manifest.entries))
    done = []
    for entry, path, err in results:
        if err is not None:
            log.warning("skipping %s: %s", entry.id, err)
            continue
        item = {k: v for k, v in entry.__dict__.items() if v is not None}
        item["annotation_path"] = os.path.abspath(path)
        done.append(item)
    atomic_write(os.path.join(args.out, "manifest.json"), dumps_json({"entries": done}))
    print(f"annotated {len(done)}/{len(manifest.entries)} files")
    return EXIT_OK if done or not manifest.entries else EXIT_DATA


def load_annotation(path: str) -> tuple[Tonality, float, list[ChordSymbol]]:
    with open(path) as f:
        doc = json.load(f)
    try:
        ton = Tonality(doc["tonality"]["tonic"], doc["tonality"]["mode"])
        chords = [ChordSymbol(c["root"], c["quality"], c["bar"], c["beat"]) for c in doc["chords"]]
        return ton, float(doc["tempo_bpm"]), chords
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"bad annotation {path}: {e}") from None


# ---------------------------------------------------------------------------
# analyze

CHORD_LABELS = [ChordSymbol(r, q).name for r in range(12) for q in QUALITY_NAMES]


def chord_index(c: ChordSymbol) -> int:
    return c.root * len(QUALITY_NAMES) + QUALITY_NAMES.index(c.quality)


@dataclass
class Analysis:
    frequency: dict[str, Counter]  # genre -> chord name -> count
    transitions: np.ndarray  # 120 x 120, diagonal zeroed
    self_transitions: np.ndarray  # 120
    bpm: dict[str, list[float]]


def analyze_pieces(pieces: Sequence[tuple[str, Tonality, float, list[ChordSymbol]]]) -> Analysis:
    """Chord statistics on key-normalized progressions (majors to C, minors to A).

    Rest beats are dropped before counting transitions.
    """
    n = len(CHORD_LABELS)
    freq: dict[str, Counter] = defaultdict(Counter)
    trans = np.zeros((n, n), dtype=np.int64)
    bpm: dict[str, list[float]] = defaultdict(list)
    for genre, tonality, tempo, chords in pieces:
        shift = reference_offset(tonality)
        seq = [chord_index(c.transposed(shift)) for c in chords if not c.is_rest]
        for i in seq:
            freq[genre][CHORD_LABELS[i]] += 1
        for a, b in zip(seq, seq[1:]):
            trans[a, b] += 1
        bpm[genre].append(tempo)
    diag = np.diag(trans).copy()
    np.fill_diagonal(trans, 0)
    return Analysis(dict(freq), trans, diag, dict(bpm))


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def write_analysis(a: Analysis, out_dir: str, bpm_bin: float = 5.0) -> list[str]:
    files = {}
    rows = [["genre", "chord", "count"]]
    for genre in sorted(a.frequency):
        for name in CHORD_LABELS:
            if a.frequency[genre][name]:
                rows.append([genre, name, a.frequency[genre][name]])
    files["chord_frequency.csv"] = _csv(rows)
    files["chord_transitions.csv"] = _csv([["from"] + CHORD_LABELS] +
                                          [[CHORD_LABELS[i]] + list(map(int, a.transitions[i]))
                                           for i in range(len(CHORD_LABELS))])
    files["chord_self_transitions.csv"] = _csv([["chord", "count"]] +
                                               [[CHORD_LABELS[i], int(c)] for i, c in enumerate(a.self_transitions)])
    rows = [["genre", "bpm_lo", "bpm_hi", "count"]]
    for genre in sorted(a.bpm):
        hist = Counter(math.floor(t / bpm_bin) for t in a.bpm[genre])
        for b in sorted(hist):
            rows.append([genre, b * bpm_bin, (b + 1) * bpm_bin, hist[b]])
    files["bpm_histogram.csv"] = _csv(rows)
    paths = []
    for name, text in files.items():
        p = os.path.join(out_dir, name)
        atomic_write(p, text)
        paths.append(p)
    return paths


def cmd_analyze(args, cfg) -> int:
    manifest = DatasetManifest.load(args.manifest, require=("midi_path", "annotation_path"))
    pieces = []
    for e in manifest.entries:
        ton, tempo, chords = load_annotation(e.annotation_path)
        pieces.append((e.genre or "unknown", ton, tempo, chords))
    paths = write_analysis(analyze_pieces(pieces), args.out, cfg["bpm_bin"])
    for p in paths:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# tokenize / train


def load_bundle(entry_semantic: Optional[str], entry_frames: Optional[str], cfg: dict) -> Optional[FeatureBundle]:
    semantic = ingest_semantic(entry_semantic) if entry_semantic else None
    if entry_frames:
        return extract_bundle(read_frames(entry_frames), semantic, cfg["m_min"], cfg["m_max"])
    if semantic is not None:
        return FeatureBundle(semantic=semantic, duration_sec=len(semantic) / SEMANTIC_RATE)
    return None


def load_piece(entry: ManifestEntry, cfg: dict) -> musprod.PieceData:
    return musprod.prepare_piece(read_midi(entry.midi_path), load_bundle(entry.semantic_path, entry.frames_path, cfg))


def cmd_tokenize(args, cfg) -> int:
    manifest = DatasetManifest.load(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    for e in manifest.entries:
        piece = musprod.prepare_piece(read_midi(e.midi_path))
        tokens, _ = musprod.stage_tokens(piece, args.stage)
        path = os.path.join(args.out, f"{e.id}.{args.stage}.vmtk")
        tk.write_token_file(path, tokens)
        print(f"{path}: {len(tokens)} tokens")
    return EXIT_OK


def stage_config(role: str, cfg: dict) -> musprod.StageConfig:
    embed = musprod.PAPER_EMBED if cfg["profile"] == "paper" else musprod.DESK_EMBED
    return musprod.StageConfig(role, net_config(cfg), tuple(embed.items()),
                               conditional=not (role == "chord" and cfg["unconditional"]),
                               ablations=tuple(cfg["ablations"]))


def cmd_train(args, cfg) -> int:
    manifest = DatasetManifest.load(args.manifest)
    train = [load_piece(e, cfg) for e in manifest.split("train")]
    val = [load_piece(e, cfg) for e in manifest.split("val")]
    if not train:
        raise DataError("manifest has no training entries")
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"{args.stage}.ckpt")
    if args.stage == "vmcp":
        vcfg = metrics.VMCPConfig(video_dim=_video_dim(train), segments=cfg["segments"], epochs=cfg["vmcp_epochs"],
                                  lr=cfg["vmcp_lr"], batch_size=cfg["vmcp_batch_size"], seed=cfg["seed"])
        pairs = [(metrics.video_features(p.bundle), metrics.music_features(p.score)) for p in train]
        model, curve = metrics.train_vmcp(pairs, vcfg)
        model.save(ckpt)
        history = {"train_loss": curve}
    else:
        tcfg = musprod.TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"],
                                   target_accuracy=cfg["target_accuracy"],
                                   checkpoint_dir=os.path.join(args.out, "epochs"),
                                   keep_checkpoints=cfg["keep_checkpoints"])
        model = musprod.train_stage(args.stage, train, tcfg, stage_config(args.stage, cfg), val, resume=args.resume)
        model.save(ckpt)
        history = model.history
    write_provenance(ckpt + ".provenance.json", "train", cfg, stage=args.stage,
                     checkpoint_hash=file_hash(ckpt), history=history)
    print(ckpt)
    return EXIT_OK


def _video_dim(pieces) -> int:
    if any(p.bundle is None for p in pieces):
        raise DataError("vmcp training needs semantic or frame features for every entry")
    return metrics.video_features(pieces[0].bundle).shape[1]


# ---------------------------------------------------------------------------
# generate

REQUEST_KEYS = {"video_features", "n_bars", "seed", "temperature", "top_p", "mode", "ablations"}


def load_models(model_dir: str, roles: Sequence[str]) -> dict[str, musprod.StageModel]:
    models = {}
    for role in roles:
        path = os.path.join(model_dir, f"{role}.ckpt")
        if not os.path.exists(path):
            raise DataError(f"missing checkpoint {path}")
        models[role] = musprod.StageModel.load(path)[0]
    return models


def roles_for(mode: str) -> tuple[str, ...]:
    return {"vmusprod": ("chord", "melody", "accomp"), "video2music": ("video2music",),
            "video2chord2music": ("chord", "chord2music")}[mode]


def cmd_generate(args, cfg) -> int:
    request: dict = {}
    if args.request:
        with open(args.request) as f:
            request = json.load(f)
        unknown = set(request) - REQUEST_KEYS
        if unknown:
            raise UsageError(f"unknown generation request key(s) {sorted(unknown)}")
        base = os.path.dirname(os.path.abspath(args.request))
        feats = request.pop("video_features", {}) or {}
        for k in ("semantic", "frames"):
            if feats.get(k) and not os.path.isabs(feats[k]):
                feats[k] = os.path.join(base, feats[k])
        args.semantic = args.semantic or feats.get("semantic")
        args.frames = args.frames or feats.get("frames")
        # request values sit between the config file and explicit flags
        cfg = load_config(None, {**{k: v for k, v in cfg.items()}, **request, **args.flag_overrides})
    models = load_models(args.models, roles_for(cfg["mode"]))
    bundle = load_bundle(args.semantic, args.frames, cfg)
    sampling = musprod.SamplingParams(cfg["temperature"], cfg["top_p"], cfg["greedy"])
    if bundle is None:
        if cfg["n_bars"] is None:
            raise UsageError("n_bars is required without video features")
        gen = musprod.generate_unconditional(models, cfg["n_bars"], sampling, cfg["seed"])
    else:
        gen = musprod.generate(models, bundle, cfg["n_bars"], sampling, cfg["mode"], cfg["ablations"], cfg["seed"])
    data = write_midi(gen.score)
    atomic_write(args.out, data)
    write_provenance(args.out + ".provenance.json", "generate", cfg,
                     generation=gen.provenance,
                     checkpoint_hashes={r: file_hash(os.path.join(args.models, f"{r}.ckpt")) for r in sorted(models)},
                     inputs={"semantic": args.semantic, "frames": args.frames},
                     output_hash=hashlib.sha256(data).hexdigest())
    print(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

METRIC_COLUMNS = ("sc", "pe", "pce", "ebr", "ioi")


def midi_files(directory: str) -> list[str]:
    if not os.path.isdir(directory):
        raise DataError(f"{directory} is not a directory")
    return sorted(os.path.join(directory, f) for f in os.listdir(directory) if f.lower().endswith((".mid", ".midi")))


def quality_table(sets: dict[str, list[Score]]) -> tuple[str, dict]:
    rows = {name: metrics.mean_report([metrics.quality_metrics(s) for s in scores]).to_dict()
            for name, scores in sets.items()}
    width = max(len(n) for n in rows) + 2
    lines = ["Method".ljust(width) + "".join(c.upper().rjust(9) for c in METRIC_COLUMNS)]
    for name, vals in rows.items():
        cells = "".join(("NA" if vals[c] is None else f"{vals[c]:.4f}").rjust(9) for c in METRIC_COLUMNS)
        lines.append(name.ljust(width) + cells)
    return "\n".join(lines) + "\n", rows


def cmd_evaluate(args, cfg) -> int:
    if args.what == "quality":
        sets = {}
        if args.real:
            sets["Real"] = [read_midi(p) for p in midi_files(args.real)]
        sets[args.label] = [read_midi(p) for p in midi_files(args.generated)]
        text, rows = quality_table(sets)
        print(text, end="")
        if args.out:
            atomic_write(args.out, dumps_json(rows))
        return EXIT_OK

    if not (args.model and args.manifest):
        raise UsageError("evaluate vmcp needs --model and --manifest")
    model = metrics.VMCPModel.load(args.model)
    manifest = DatasetManifest.load(args.manifest)
    entries = manifest.split("test") or manifest.entries
    videos, music = [], []
    for e in entries:
        bundle = load_bundle(e.semantic_path, e.frames_path, cfg)
        if bundle is None:
            raise DataError(f"entry {e.id} has no video features")
        videos.append(metrics.video_features(bundle))
        midi = os.path.join(args.generated, f"{e.id}.mid") if args.generated else e.midi_path
        music.append(metrics.music_features(read_midi(midi)))
    report = metrics.vmcp_eval(music, videos, model, ks=cfg["ks"])
    print(" ".join(f"P@{k}={v:.4f}" for k, v in report.p_at.items()) + f" AR={report.average_rank:.3f}")
    if args.out:
        atomic_write(args.out, report.to_json())
        tensorfile.save(args.out + ".similarity.vmft", report.similarity_matrix)
        write_provenance(args.out + ".provenance.json", "evaluate", cfg, checkpoint_hash=file_hash(args.model))
    return EXIT_OK


# ---------------------------------------------------------------------------
# toy corpus


def cmd_toy(args, cfg) -> int:
    from . import toy
    from .video import write_frames

    os.makedirs(args.out, exist_ok=True)
    entries = []
    for i, p in enumerate(toy.toy_corpus(args.n, args.bars, cfg["seed"])):
        base = os.path.join(args.out, p.id)
        atomic_write(base + ".mid", write_midi(p.score))
        write_frames(base + ".vmfr", p.frames)
        tensorfile.save(base + ".semantic.vmft", p.semantic)
        entries.append({"id": p.id, "midi_path": p.id + ".mid", "semantic_path": p.id + ".semantic.vmft",
                        "frames_path": p.id + ".vmfr", "genre": p.genre, "split": "train"})
    atomic_write(os.path.join(args.out, "manifest.json"), dumps_json({"entries": entries}))
    print(os.path.join(args.out, "manifest.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vmusprod", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; VALUE is parsed as JSON when possible")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("annotate", help="quantize, split, chord and key annotation")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)

    t = sub.add_parser("tokenize", help="write stage token caches")
    t.add_argument("--manifest", required=True)
    t.add_argument("--stage", required=True, choices=sorted(musprod.ROLES))
    t.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train one stage or the VMCP encoders")
    tr.add_argument("--stage", required=True, choices=STAGES)
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True, help="checkpoint directory")
    tr.add_argument("--resume", help="epoch checkpoint to resume from")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--ablate", action="append", choices=musprod.ABLATIONS)
    tr.add_argument("--unconditional", action="store_true", default=None)

    g = sub.add_parser("generate", help="generate a MIDI file for one video")
    g.add_argument("--models", required=True, help="directory holding <role>.ckpt files")
    g.add_argument("--request", help="generation request JSON")
    g.add_argument("--semantic")
    g.add_argument("--frames")
    g.add_argument("--out", required=True)
    g.add_argument("--n-bars", type=int)
    g.add_argument("--temperature", type=float)
    g.add_argument("--top-p", type=float)
    g.add_argument("--greedy", action="store_true", default=None)
    g.add_argument("--mode", choices=musprod.MODES)
    g.add_argument("--ablate", action="append", choices=musprod.ABLATIONS)

    e = sub.add_parser("evaluate", help="quality metrics or VMCP retrieval")
    e.add_argument("what", choices=("quality", "vmcp"))
    e.add_argument("--generated", help="directory of generated MIDI files")
    e.add_argument("--real", help="directory of reference MIDI files")
    e.add_argument("--label", default="Generated")
    e.add_argument("--model")
    e.add_argument("--manifest")
    e.add_argument("--out")

    an = sub.add_parser("analyze", help="chord and tempo statistics of an annotated corpus")
    an.add_argument("--manifest", required=True)
    an.add_argument("--out", required=True)

    toy = sub.add_parser("toy", help="write the synthetic demo corpus")
    toy.add_argument("--out", required=True)
    toy.add_argument("--n", type=int, default=8)
    toy.add_argument("--bars", type=int, default=2)
    return p


FLAG_KEYS = {"seed": "seed", "profile": "profile", "epochs": "epochs", "lr": "lr", "n_bars": "n_bars",
             "temperature": "temperature", "top_p": "top_p", "greedy": "greedy", "mode": "mode",
             "ablate": "ablations", "unconditional": "unconditional"}


def _flag_overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = sorted(set(value)) if key == "ablations" else value
    return out


COMMANDS = {"annotate": cmd_annotate, "tokenize": cmd_tokenize, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "analyze": cmd_analyze, "toy": cmd_toy}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        args.flag_overrides = _flag_overrides(args)
        cfg = load_config(args.config, args.flag_overrides)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
