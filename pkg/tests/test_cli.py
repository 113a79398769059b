"""Command-line and experiment-protocol tests on a small synthetic dataset."""

import csv
import shutil
import subprocess
import sys

import numpy as np
import pytest

from nasalbio import io
from nasalbio.cli import main
from nasalbio.experiment import ExperimentSpec, ProtocolError, run_experiment, split_gallery
from nasalbio.pipeline import PipelineResult
from nasalbio.descriptors import FeatureVector
from nasalbio.synthetic import signal_noise_features

SMALL_GA = "ga.population_multiplier = 2\nga.max_generations = 4\nga.rng_seed = 1\n"


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Six subjects with four captures each, synthesised and featurised once."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--subjects", "6", "--captures", "4",
                 "--noise", "0.05", "--max-roll", "5", "--seed", "3"]) == 0
    ext = root / "ext"
    assert main(["extract", "--manifest", str(data / "manifest.csv"), "--out", str(ext)]) == 0
    return root, data / "manifest.csv", ext / "features_patches"


def _read_summary(out):
    with open(out / "summary.csv") as fh:
        return {k: v for k, v in csv.reader(fh)}


def _run(args, out):
    return main(args + ["--out", str(out)])


def test_synth_writes_manifest_and_truth(dataset):
    root, manifest, _ = dataset
    rows = io.read_manifest(manifest)
    assert len(rows) == 24
    assert sum(r["expression"] == "neutral" for r in rows) == 6
    truth = io.read_landmarks_csv(manifest.parent / "truth.csv")
    assert len(truth) == 24 and all(t is not None for t in truth.values())


def test_extract_writes_features_and_landmarks(dataset):
    root, manifest, stem = dataset
    ids, X, meta = io.read_features(stem)
    assert X.shape == (24, 4788) and meta["K"] == 19 and meta["h_l"] == 21
    lms = io.read_landmarks_csv(root / "ext" / "landmarks.csv")
    assert all(v is not None for v in lms.values())


def test_probe_equals_gallery_reads_full_r1(dataset, tmp_path):
    _, manifest, stem = dataset
    code = _run(["match", "--manifest", str(manifest), "--features", str(stem),
                 "--probe-equals-gallery"], tmp_path)
    assert code == 0
    assert float(_read_summary(tmp_path)["r1"]) == 1.0
    assert (tmp_path / "cmc.png").stat().st_size > 0


def test_neutral_gallery_beats_chance(dataset, tmp_path):
    _, manifest, stem = dataset
    assert _run(["match", "--manifest", str(manifest), "--features", str(stem)], tmp_path) == 0
    assert float(_read_summary(tmp_path)["r1"]) > 1 / 6
    part = list(csv.DictReader(open(tmp_path / "partition.csv")))
    gallery = {r["sample_id"] for r in part if r["role"] == "gallery"}
    probes = {r["sample_id"] for r in part if r["role"] == "probe"}
    assert len(gallery) == 6 and len(probes) == 18 and not gallery & probes


@pytest.mark.parametrize("protocol,files", [
    ("verification", ["roc.csv", "roc.png", "cmc.csv", "scores.csv"]),
    ("expression_vs_expression", ["expression_r1.csv", "cmc.png"]),
    ("variable_gallery_size", ["gallery_size_r1.csv", "gallery_size.png"]),
])
def test_every_protocol_writes_its_report(dataset, tmp_path, protocol, files):
    _, manifest, stem = dataset
    code = _run(["experiment", "--manifest", str(manifest), "--features", str(stem),
                 "--protocol", protocol], tmp_path)
    assert code == 0
    for name in files + ["summary.csv", "failures.csv", "config_echo.txt"]:
        assert (tmp_path / name).exists(), name


def test_trained_mask_keeps_selection_and_test_subjects_apart(dataset, tmp_path):
    _, manifest, stem = dataset
    cfg = tmp_path / "ga.cfg"
    cfg.write_text(SMALL_GA)
    out = tmp_path / "o"
    code = _run(["experiment", "--manifest", str(manifest), "--features", str(stem),
                 "--protocol", "identification", "--train-mask", "--config", str(cfg)], out)
    assert code == 0
    roles = dict(csv.reader(open(out / "selection_subjects.csv")))
    used = {r["subject"] for r in csv.DictReader(open(out / "partition.csv"))}
    assert used and all(roles[s] == "test" for s in used)
    Bn, rec = io.read_mask_json(out / "mask.json")
    assert Bn.size == 19 and rec["descriptor"] == "patches"
    assert (out / "ga_history.png").exists()


def test_select_then_match_with_mask(dataset, tmp_path):
    _, manifest, stem = dataset
    cfg = tmp_path / "ga.cfg"
    cfg.write_text(SMALL_GA)
    assert _run(["select", "--manifest", str(manifest), "--features", str(stem),
                 "--config", str(cfg)], tmp_path / "sel") == 0
    mask = tmp_path / "sel" / "mask.json"
    assert (tmp_path / "sel" / "history.png").exists()
    assert _run(["match", "--manifest", str(manifest), "--features", str(stem),
                 "--mask", str(mask)], tmp_path / "m") == 0
    Bn, _ = io.read_mask_json(mask)
    assert int(_read_summary(tmp_path / "m")["selected_descriptors"]) == int(Bn.sum())


def test_outputs_are_byte_reproducible(dataset, tmp_path):
    _, manifest, stem = dataset
    args = ["experiment", "--manifest", str(manifest), "--features", str(stem),
            "--protocol", "verification", "--seed", "5"]
    assert _run(args, tmp_path / "a") == 0
    assert _run(args, tmp_path / "b") == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n


def test_partial_failure_exit_code(dataset, tmp_path):
    _, manifest, stem = dataset
    rows = io.read_manifest(manifest)
    empty = tmp_path / "empty.xyz"
    empty.write_text("")
    rows.append(dict(sample_id="zzz", path=str(empty), format="xyz", subject=rows[0]["subject"],
                     expression="happiness", session="99"))
    io.write_manifest(tmp_path / "m.csv", rows)
    code = _run(["match", "--manifest", str(tmp_path / "m.csv"), "--features", str(stem)], tmp_path / "o")
    assert code == 2
    fails = list(csv.reader(open(tmp_path / "o" / "failures.csv")))
    assert fails[1][0] == "zzz"


def test_total_failure_exit_code(tmp_path):
    empty = tmp_path / "empty.xyz"
    empty.write_text("")
    io.write_manifest(tmp_path / "m.csv", [dict(sample_id="a", path="empty.xyz", format="xyz",
                                                 subject="1", expression="neutral", session="1")])
    assert _run(["landmark", "--manifest", str(tmp_path / "m.csv")], tmp_path / "o") == 1
    fails = list(csv.reader(open(tmp_path / "o" / "failures.csv")))
    assert fails[1][:2] == ["a", "load"]


def test_protocol_violation_stops_before_compute(tmp_path):
    rows = [dict(sample_id=f"{s}{c}", path=str(tmp_path / "does_not_exist.ply"), format="ply",
                 subject=s, expression="neutral", session=str(c)) for s in "ab" for c in range(2)]
    with pytest.raises(ProtocolError, match="captures per subject"):
        run_experiment(ExperimentSpec(protocol="variable_gallery_size", gallery_sizes=(1, 2, 3)),
                       rows, tmp_path / "o")
    with pytest.raises(ProtocolError, match="expression"):
        run_experiment(ExperimentSpec(gallery_expression="surprise"), rows, tmp_path / "o")
    assert not (tmp_path / "o").exists()


def test_protocol_error_exit_code(dataset, tmp_path):
    _, manifest, stem = dataset
    code = _run(["experiment", "--manifest", str(manifest), "--features", str(stem),
                 "--protocol", "variable_gallery_size", "--gallery-sizes", "1,5"], tmp_path)
    assert code == 1


def test_split_gallery_is_disjoint_and_ordered():
    rows = [dict(sample_id=f"{s}_{c}", subject=s, expression="neutral" if c < 2 else "happy",
                 session=str(c)) for s in "xyz" for c in range(4)]
    part = split_gallery(rows, ExperimentSpec(gallery_per_subject=2))
    assert part.gallery == ("x_0", "x_1", "y_0", "y_1", "z_0", "z_1")
    assert not set(part.gallery) & set(part.probes) and len(part.probes) == 6


def test_eval_landmarks_writes_tables_and_figure(dataset, tmp_path):
    root, manifest, _ = dataset
    code = _run(["eval-landmarks", "--manifest", str(manifest), "--landmarks",
                 str(root / "ext" / "landmarks.csv"), "--truth", str(manifest.parent / "truth.csv")],
                tmp_path)
    assert code == 0
    table = list(csv.reader(open(tmp_path / "landmark_precision.csv")))
    assert table[0] == ["threshold_mm", "L3", "L6", "L2", "L7", "L4"]
    assert [r[0] for r in table[1:]] == ["<10", "<12", "<15", "<20"]
    assert table[-1][-1] == "100.00%"
    assert (tmp_path / "landmark_precision.png").exists()
    cons = list(csv.reader(open(tmp_path / "landmark_consistency.csv")))
    assert cons[0] == ["dataset", "L1", "L2", "L3", "L5", "L6", "L7"]


def _feature_results(d, seed):
    """Wrap signal/noise vectors as pipeline results with a matching manifest."""
    s_n, K, h_l = d.layout
    X = np.vstack([d.gallery, d.probes])
    labels = np.concatenate([d.gallery_labels, d.probe_labels])
    rows, results = [], []
    seen = {}
    for x, lab in zip(X, labels):
        c = seen.get(lab, 0)
        seen[lab] = c + 1
        sid = f"s{lab:02d}_c{c}"
        rows.append(dict(sample_id=sid, path="", format="", subject=f"s{lab:02d}",
                         expression="neutral", session=str(c)))
        results.append(PipelineResult(sid, features={"patches": FeatureVector(x, s_n, K, h_l)}))
    return rows, sorted(results, key=lambda r: r.sample_id)


@pytest.mark.slow
def test_variable_gallery_mostly_non_decreasing(tmp_path):
    ok = 0
    runs = 10
    for seed in range(runs):
        d = signal_noise_features(K=10, n_informative=10, n_subjects=20, n_gallery=2, n_probe=2,
                                  signal=0.35, seed=seed)
        rows, results = _feature_results(d, seed)
        spec = ExperimentSpec(protocol="variable_gallery_size", gallery_sizes=(1, 2, 3), draws=3,
                              seed=seed)
        rep = run_experiment(spec, rows, tmp_path / str(seed), results=results)
        r1 = [rep.summary[f"r1[size={k}]"] for k in (1, 2, 3)]
        ok += bool(np.all(np.diff(r1) >= 0))
    assert ok >= 0.9 * runs


def test_console_script_help():
    exe = shutil.which("nasalbio")
    cmd = [exe] if exe else [sys.executable, "-m", "nasalbio.cli"]
    out = subprocess.run(cmd + ["--help"], capture_output=True, text=True, check=True)
    for sub in ("synth", "landmark", "extract", "select", "match", "experiment", "eval-landmarks"):
        assert sub in out.stdout
