from __future__ import annotations

import csv
import json
import os

import numpy as np
import pytest

from vmusprod import cli
from vmusprod.annotate import QUALITY_NAMES, ChordSymbol, Tonality, skyline_split
from vmusprod.midi import NoteEvent, Score, quantize, read_midi, write_midi

TPQ = 480


def run(*argv):
    return cli.main([str(a) for a in argv])


def triad_score(roots_qualities, tempo=120.0):
    """One block chord per beat; (root pitch, intervals) per beat."""
    notes = []
    for beat, (root, ivs) in enumerate(roots_qualities):
        notes += [NoteEvent(beat * TPQ, TPQ, 48 + root + i, 80) for i in ivs]
        notes.append(NoteEvent(beat * TPQ, TPQ, 72 + root, 90))
    return Score(TPQ, tempo, notes=tuple(notes))


def write_manifest(d, entries):
    path = os.path.join(d, "manifest.json")
    with open(path, "w") as f:
        json.dump({"entries": entries}, f)
    return path


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert run("toy", "--out", d, "--n", 8, "--bars", 2) == 0
    return d


@pytest.fixture(scope="module")
def model_dir(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("models")
    for stage in ("chord", "melody", "accomp"):
        assert run("--set", "target_accuracy=0.95", "train", "--stage", stage, "--manifest",
                   toy_dir / "manifest.json", "--out", out) == 0
    for stage in ("chord", "melody", "accomp"):
        assert run("--set", "target_accuracy=0.95", "train", "--stage", stage, "--ablate", "color", "--manifest",
                   toy_dir / "manifest.json", "--out", out / "nocolor") == 0
    return out


# -- annotate

def test_annotate_three_files(tmp_path):
    entries = []
    for i in range(3):
        p = tmp_path / f"p{i}.mid"
        p.write_bytes(write_midi(triad_score([(0, (0, 4, 7)), (5, (0, 4, 7)), (7, (0, 4, 7)), (0, (0, 4, 7))])))
        entries.append({"id": f"p{i}", "midi_path": p.name})
    out = tmp_path / "ann"
    assert run("annotate", "--manifest", write_manifest(tmp_path, entries), "--out", out) == 0
    for i in range(3):
        assert (out / f"p{i}.json").exists()
        assert (out / f"p{i}.melody.mid").exists() and (out / f"p{i}.accomp.mid").exists()
    assert len(json.loads((out / "manifest.json").read_text())["entries"]) == 3


def test_annotate_skips_corrupt_file(tmp_path, capsys):
    entries = []
    for i in range(3):
        p = tmp_path / f"p{i}.mid"
        p.write_bytes(write_midi(triad_score([(0, (0, 4, 7))] * 4)) if i != 1 else b"MThd garbage")
        entries.append({"id": f"p{i}", "midi_path": p.name})
    out = tmp_path / "ann"
    assert run("annotate", "--manifest", write_manifest(tmp_path, entries), "--out", out) == 0
    assert sorted(f.name for f in out.glob("p*.json")) == ["p0.json", "p2.json"]
    assert "annotated 2/3" in capsys.readouterr().out


def test_annotate_all_corrupt_fails(tmp_path):
    (tmp_path / "x.mid").write_bytes(b"nope")
    assert run("annotate", "--manifest", write_manifest(tmp_path, [{"id": "x", "midi_path": "x.mid"}]),
               "--out", tmp_path / "ann") == 2


def test_annotation_parity_with_library(tmp_path, toy_dir):
    entries = json.loads((toy_dir / "manifest.json").read_text())["entries"][:2]
    for e in entries:
        e["midi_path"] = str(toy_dir / e["midi_path"])
        for k in ("semantic_path", "frames_path"):
            e.pop(k)
    out = tmp_path / "ann"
    assert run("annotate", "--manifest", write_manifest(tmp_path, entries), "--out", out) == 0
    for e in entries:
        score = quantize(read_midi(e["midi_path"]))
        doc = cli.annotation_document(score, f"{e['id']}.melody.mid", f"{e['id']}.accomp.mid")
        assert (out / f"{e['id']}.json").read_bytes() == cli.dumps_json(doc).encode()
        split = skyline_split(score)
        assert (out / f"{e['id']}.melody.mid").read_bytes() == write_midi(split.melody)
        assert (out / f"{e['id']}.accomp.mid").read_bytes() == write_midi(split.accompaniment)


# -- analyze

def _annotated(tmp_path, pieces):
    """pieces: list of (id, genre, Score) -> annotated manifest path."""
    entries = []
    for pid, genre, score in pieces:
        (tmp_path / f"{pid}.mid").write_bytes(write_midi(score))
        entries.append({"id": pid, "midi_path": f"{pid}.mid", "genre": genre})
    out = tmp_path / "ann"
    assert run("annotate", "--manifest", write_manifest(tmp_path, entries), "--out", out) == 0
    return out / "manifest.json"


def _transitions(path):
    with open(path) as f:
        rows = list(csv.reader(f))
    labels = rows[0][1:]
    return {(r[0], labels[j]): int(v) for r in rows[1:] for j, v in enumerate(r[1:]) if int(v)}


def test_analyze_counts_direct_transitions(tmp_path):
    maj = (0, 4, 7)
    score = triad_score([(0, maj), (5, maj), (0, maj), (0, maj)])
    manifest = _annotated(tmp_path, [("a", "pop", score)])
    out = tmp_path / "stats"
    assert run("analyze", "--manifest", manifest, "--out", out) == 0
    assert _transitions(out / "chord_transitions.csv") == {("CM", "FM"): 1, ("FM", "CM"): 1}
    selfs = {r[0]: int(r[1]) for r in csv.reader(open(out / "chord_self_transitions.csv")) if r[0] != "chord"}
    assert selfs["CM"] == 1 and sum(selfs.values()) == 1


def test_analyze_key_normalization(tmp_path):
    maj = (0, 4, 7)
    # D major: I IV V I -> after normalization CM FM GM CM
    score = triad_score([(2, maj), (7, maj), (9, maj), (2, maj)] * 2)
    manifest = _annotated(tmp_path, [("d", "rock", score)])
    out = tmp_path / "stats"
    assert run("analyze", "--manifest", manifest, "--out", out) == 0
    t = _transitions(out / "chord_transitions.csv")
    assert t == {("CM", "FM"): 2, ("FM", "GM"): 2, ("GM", "CM"): 2}
    freq = list(csv.reader(open(out / "chord_frequency.csv")))
    assert ["rock", "CM", "4"] in freq


def test_transition_row_sums_oracle():
    rng = np.random.default_rng(0)
    qualities = list(QUALITY_NAMES)
    pieces = []
    for _ in range(30):
        chords = [ChordSymbol(int(rng.integers(12)), str(rng.choice(qualities)), b // 4, b % 4)
                  for b in range(int(rng.integers(1, 20)))]
        pieces.append(("g", Tonality(0, "major"), 120.0, chords))
    a = cli.analyze_pieces(pieces)
    occurrences = np.zeros(120, dtype=int)
    endings = np.zeros(120, dtype=int)
    for _, _, _, chords in pieces:
        for c in chords:
            occurrences[cli.chord_index(c)] += 1
        endings[cli.chord_index(chords[-1])] += 1
    assert np.array_equal(a.transitions.sum(axis=1) + a.self_transitions, occurrences - endings)


def test_analyze_missing_genre_is_unknown(tmp_path):
    manifest = _annotated(tmp_path, [("a", None, triad_score([(0, (0, 4, 7))] * 4))])
    out = tmp_path / "stats"
    assert run("analyze", "--manifest", manifest, "--out", out) == 0
    assert "unknown" in (out / "bpm_histogram.csv").read_text()


# -- config and errors

def test_unknown_config_key_named(tmp_path, capsys, toy_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"temprature": 0.5}))
    code = run("--config", cfg, "toy", "--out", tmp_path / "t")
    assert code != 0 and "temprature" in capsys.readouterr().err
    code = run("--set", "colour=1", "toy", "--out", tmp_path / "t")
    assert code != 0 and "colour" in capsys.readouterr().err


def test_config_from_environment(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"top_p": 0.5, "seed": 4}))
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    got = cli.load_config(None, {"seed": 9})
    assert got["top_p"] == 0.5 and got["seed"] == 9


def test_usage_errors_exit_1(tmp_path):
    assert run("train", "--stage", "chord") == 1
    assert run("bogus") == 1


def test_manifest_validation(tmp_path):
    (tmp_path / "a.mid").write_bytes(write_midi(triad_score([(0, (0, 4, 7))])))
    dup = write_manifest(tmp_path, [{"id": "a", "midi_path": "a.mid"}, {"id": "a", "midi_path": "a.mid"}])
    with pytest.raises(cli.DataError, match="duplicate"):
        cli.DatasetManifest.load(dup)
    missing = write_manifest(tmp_path, [{"id": "a", "midi_path": "zzz.mid"}])
    with pytest.raises(cli.DataError, match="does not exist"):
        cli.DatasetManifest.load(missing)
    bad_split = write_manifest(tmp_path, [{"id": "a", "midi_path": "a.mid", "split": "dev"}])
    with pytest.raises(cli.DataError, match="split"):
        cli.DatasetManifest.load(bad_split)
    assert run("analyze", "--manifest", missing, "--out", tmp_path / "o") == 2


# -- generate and evaluate

def test_generate_records_ablation_and_is_deterministic(toy_dir, model_dir, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"g{k}.mid"
        assert run("--seed", 3, "generate", "--models", model_dir / "nocolor", "--ablate", "color",
                   "--semantic", toy_dir / "toy00.semantic.vmft", "--frames", toy_dir / "toy00.vmfr",
                   "--out", out) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    prov = json.loads((tmp_path / "g0.mid.provenance.json").read_text())
    assert prov["generation"]["ablations"] == ["color"]
    assert prov["config"]["ablations"] == ["color"]
    assert prov["seed"] == 3 and len(prov["config_hash"]) == 64
    assert set(prov["checkpoint_hashes"]) == {"chord", "melody", "accomp"}
    p1 = json.loads((tmp_path / "g1.mid.provenance.json").read_text())
    assert p1 == prov | {"output_hash": p1["output_hash"]} and p1["output_hash"] == prov["output_hash"]


def test_generate_ablation_mismatch_is_data_error(toy_dir, model_dir, tmp_path):
    assert run("generate", "--models", model_dir, "--ablate", "color", "--frames", toy_dir / "toy00.vmfr",
               "--semantic", toy_dir / "toy00.semantic.vmft", "--out", tmp_path / "x.mid") == 2


def test_generate_request_json(toy_dir, model_dir, tmp_path):
    req = tmp_path / "req.json"
    req.write_text(json.dumps({"video_features": {"semantic": str(toy_dir / "toy01.semantic.vmft"),
                                                  "frames": str(toy_dir / "toy01.vmfr")},
                               "n_bars": 1, "seed": 5, "top_p": 0.8}))
    assert run("generate", "--models", model_dir, "--request", req, "--out", tmp_path / "r.mid") == 0
    prov = json.loads((tmp_path / "r.mid.provenance.json").read_text())
    assert prov["generation"]["n_bars"] == 1 and prov["seed"] == 5 and prov["config"]["top_p"] == 0.8
    score = read_midi(tmp_path / "r.mid")
    assert all(n.offset <= 4 * score.ticks_per_quarter for n in score.notes)
    req.write_text(json.dumps({"bogus": 1}))
    assert run("generate", "--models", model_dir, "--request", req, "--out", tmp_path / "r.mid") == 1


def test_train_twice_identical_checkpoints(toy_dir, tmp_path):
    hashes = []
    for k in range(2):
        out = tmp_path / f"m{k}"
        assert run("--set", "epochs=3", "train", "--stage", "chord", "--manifest", toy_dir / "manifest.json",
                   "--out", out) == 0
        hashes.append(cli.file_hash(str(out / "chord.ckpt")))
        prov = json.loads((out / "chord.ckpt.provenance.json").read_text())
        assert prov["checkpoint_hash"] == hashes[-1]
    assert hashes[0] == hashes[1]


def test_quality_table_layout(toy_dir, tmp_path, capsys):
    gen = tmp_path / "gen"
    gen.mkdir()
    gen.joinpath("a.mid").write_bytes(write_midi(triad_score([(0, (0, 4, 7))] * 8)))
    assert run("evaluate", "quality", "--generated", gen, "--real", toy_dir, "--out", tmp_path / "q.json") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["Method", "SC", "PE", "PCE", "EBR", "IOI"]
    assert [l.split()[0] for l in lines[1:]] == ["Real", "Generated"]
    rows = json.loads((tmp_path / "q.json").read_text())
    assert rows["Generated"]["ebr"] == 0.0


def test_vmcp_train_and_evaluate(toy_dir, tmp_path):
    # the toy corpus has 8 pieces; vmcp training needs 16, so duplicate entries under new ids
    entries = json.loads((toy_dir / "manifest.json").read_text())["entries"]
    more = []
    for rep in range(2):
        for e in entries:
            e2 = {k: (str(toy_dir / v) if k.endswith("_path") else v) for k, v in e.items()}
            e2["id"] = f"{e['id']}_{rep}"
            more.append(e2)
    manifest = write_manifest(tmp_path, more)
    assert run("--set", "vmcp_epochs=2", "--set", "ks=[1,5]", "train", "--stage", "vmcp",
               "--manifest", manifest, "--out", tmp_path / "m") == 0
    assert run("--set", "ks=[1,5]", "evaluate", "vmcp", "--model", tmp_path / "m" / "vmcp.ckpt",
               "--manifest", manifest, "--out", tmp_path / "v.json") == 0
    report = json.loads((tmp_path / "v.json").read_text())
    assert set(report["p_at"]) == {"1", "5"} and len(report["ranks"]) == 16
    assert (tmp_path / "v.json.similarity.vmft").exists()
    assert (tmp_path / "v.json.provenance.json").exists()
