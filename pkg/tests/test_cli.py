import json
import math

import numpy as np
import pytest

from pcrpolicy.cli import (
    CSV_COLUMNS,
    CSV_SCHEMA,
    EXIT_LOW_CONFIDENCE,
    EXIT_OK,
    EXIT_PARSE,
    EXIT_UNKNOWN_KEY,
    EXIT_USAGE,
    main,
    read_eval_csv,
    summarize,
)
from pcrpolicy.demo_store import load_store
from pcrpolicy.geometry import RigidTransform
from pcrpolicy.plyio import write_ply
from pcrpolicy.synth import add_noise, load_episode, pose_error


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "5", "--out", str(root / "eps"), "--n-episodes", "2"]) == EXIT_OK
    eps = sorted(str(p) for p in (root / "eps").iterdir())
    assert main(["store", "--episodes", *eps, "--out", str(root / "store")]) == EXIT_OK
    return root, eps


def _infer(root, ep_dir, out, *extra, obj="test_object.ply", placement="test_placement.ply"):
    return main([
        "infer", "--store", str(root / "store"), "--task", "place-object",
        "--object", f"{ep_dir}/{obj}", "--placement", f"{ep_dir}/{placement}",
        "--out", str(out), "--rng-seed", "0", *extra,
    ])


def test_exit_code_taxonomy():
    assert (EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_UNKNOWN_KEY, EXIT_LOW_CONFIDENCE) == (0, 2, 3, 4, 5)


def test_store_counts(work, tmp_path, capsys):
    root, eps = work
    ds = load_store(root / "store")
    assert ds.counts() == {f"place-object:{s}": 2 for s in ("pick", "preplace", "place")}
    capsys.readouterr()
    assert main(["store", "--episodes", eps[0], "--out", str(tmp_path / "one")]) == EXIT_OK
    assert "place-object:place\t1" in capsys.readouterr().out
    assert load_store(tmp_path / "one").counts() == {f"place-object:{s}": 1 for s in ("pick", "preplace", "place")}


def test_store_ten_episodes(tmp_path):
    assert main(["synth", "--seed", "40", "--out", str(tmp_path / "e"), "--n-episodes", "10"]) == EXIT_OK
    eps = sorted(str(p) for p in (tmp_path / "e").iterdir())
    assert main(["store", "--episodes", *eps, "--out", str(tmp_path / "s")]) == EXIT_OK
    assert set(load_store(tmp_path / "s").counts().values()) == {10}


def test_store_from_multi_demo_episode(tmp_path):
    assert main(["synth", "--seed", "3", "--out", str(tmp_path / "e"), "--n-demos", "3"]) == EXIT_OK
    ep = next((tmp_path / "e").iterdir())
    assert main(["store", "--episodes", str(ep), "--out", str(tmp_path / "s")]) == EXIT_OK
    assert set(load_store(tmp_path / "s").counts().values()) == {3}


def test_corrupt_ply_leaves_no_store(work, tmp_path):
    import shutil

    root, eps = work
    bad = tmp_path / "bad"
    shutil.copytree(eps[0], bad)
    (bad / "demo_object.ply").write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 99\nend_header\n")
    assert main(["store", "--episodes", str(bad), "--out", str(tmp_path / "s")]) == EXIT_PARSE
    assert not (tmp_path / "s").exists()
    assert main(["store", "--episodes", str(tmp_path / "missing"), "--out", str(tmp_path / "s")]) == EXIT_PARSE
    assert not (tmp_path / "s").exists()


def test_store_refuses_existing_output(work):
    root, eps = work
    assert main(["store", "--episodes", eps[0], "--out", str(root / "store")]) == EXIT_USAGE


def test_infer_on_stored_demo_is_accepted(work, tmp_path):
    root, eps = work
    out = tmp_path / "a.json"
    code = _infer(root, eps[0], out, "--fitness-threshold", "0.7", obj="demo_object.ply", placement="demo_placement.ply")
    assert code == EXIT_OK
    rec = json.loads(out.read_text())
    assert rec["accepted"] and rec["format_version"] == 1
    ep = load_episode(eps[0])
    place = RigidTransform.from_matrix(np.reshape(rec["stages"][2]["transform"], (4, 4)))
    r, t = pose_error(place, ep.demo.place_pose @ ep.demo.pick_pose.inverse())
    assert r < 1e-2 and t < 1e-3
    for row in rec["stages"]:
        assert set(row) >= {"stage", "transform", "s_a", "s_b", "demo_index", "accepted"}


def test_infer_test_scene_matches_truth(work, tmp_path):
    # Each synthetic episode demonstrates its own relative placement, so the store
    # holds only this episode's demo.
    root, eps = work
    assert main(["store", "--episodes", eps[1], "--out", str(tmp_path / "store")]) == EXIT_OK
    out = tmp_path / "a.json"
    assert _infer(tmp_path, eps[1], out) == EXIT_OK
    rec = json.loads(out.read_text())
    truth = load_episode(eps[1]).truth
    for row in rec["stages"]:
        r, t = pose_error(RigidTransform.from_matrix(np.reshape(row["transform"], (4, 4))), truth[row["stage"]])
        assert r < math.radians(5) and t < 0.01


def test_heavy_noise_is_rejected(work, tmp_path):
    root, eps = work
    ep = load_episode(eps[0])
    write_ply(tmp_path / "noisy.ply", add_noise(ep.test_object, 0.01, 1))
    out = tmp_path / "r.json"
    code = main([
        "infer", "--store", str(root / "store"), "--task", "place-object", "--object", str(tmp_path / "noisy.ply"),
        "--placement", f"{eps[0]}/test_placement.ply", "--out", str(out), "--rng-seed", "0",
        "--fitness-threshold", "0.7",
    ])
    assert code == EXIT_LOW_CONFIDENCE
    rec = json.loads(out.read_text())
    assert rec["accepted"] is False and "rejection" in rec


def test_infer_usage_and_key_errors(work, tmp_path, capsys):
    root, eps = work
    out = tmp_path / "x.json"
    code = main(["infer", "--store", str(tmp_path / "nope"), "--task", "place-object", "--object",
                 f"{eps[0]}/test_object.ply", "--placement", f"{eps[0]}/test_placement.ply", "--out", str(out),
                 "--rng-seed", "0"])
    assert code == EXIT_USAGE
    capsys.readouterr()
    code = main(["infer", "--store", str(root / "store"), "--task", "missing-task", "--object",
                 f"{eps[0]}/test_object.ply", "--placement", f"{eps[0]}/test_placement.ply", "--out", str(out),
                 "--rng-seed", "0"])
    assert code == EXIT_UNKNOWN_KEY and "missing-task" in capsys.readouterr().err
    assert not out.exists()


def test_infer_requires_seed_and_valid_params(work, tmp_path):
    root, eps = work
    base = ["infer", "--store", str(root / "store"), "--task", "place-object", "--object", f"{eps[0]}/test_object.ply",
            "--placement", f"{eps[0]}/test_placement.ply", "--out", str(tmp_path / "x.json")]
    assert main(base) == EXIT_USAGE
    assert main(base + ["--rng-seed", "0", "--lambda-geometric", "0"]) == EXIT_USAGE
    assert main(base + ["--rng-seed", "0", "--fitness-threshold", "1.5"]) == EXIT_USAGE
    assert main(base[:3] + ["--rng-seed", "0"]) == EXIT_USAGE


def test_infer_bad_observation_is_parse_error(work, tmp_path):
    root, eps = work
    (tmp_path / "bad.ply").write_bytes(b"garbage")
    assert _infer(root, eps[0], tmp_path / "x.json", obj="../" + str(tmp_path / "bad.ply")) == EXIT_PARSE


def test_eval_csv_and_summary(tmp_path):
    out, summ = tmp_path / "m.csv", tmp_path / "s.txt"
    code = main(["eval", "--seed", "7", "--n-episodes", "2", "--n-seeds", "1", "--out", str(out),
                 "--summary", str(summ), "--noise", "0", "0.001"])
    assert code == EXIT_OK
    text = out.read_text().splitlines()
    assert text[0] == f"# {CSV_SCHEMA}" and text[1] == ",".join(CSV_COLUMNS)
    rows = read_eval_csv(out)
    assert len(rows) == 2 * 2 * 3
    assert [r["seed"] for r in rows] == sorted(r["seed"] for r in rows)
    place = [r for r in rows if r["stage"] == "place"]
    for r in place:
        assert r["success"] == int(r["accepted"] and r["rot_err"] < math.radians(5) and r["trans_err"] < 0.01)
    # The summary is recomputable from the rows.
    tuples = [(r["seed"], r["episode"], r["camera"], r["noise"], r["stage"], r["rot_err"], r["trans_err"],
               r["s_a"], r["s_b"], r["accepted"], r["success"]) for r in rows]
    assert summ.read_text().splitlines() == summarize(tuples)


def test_eval_requires_seed(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "m.csv")]) == EXIT_USAGE


def test_synth_requires_seed(tmp_path):
    assert main(["synth", "--out", str(tmp_path)]) == EXIT_USAGE
