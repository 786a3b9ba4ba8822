import json

import numpy as np
import pytest

from attrfuse import tensor as T
from attrfuse.cli import main
from attrfuse.data import load_dataset
from attrfuse.training import read_metrics

SMALL_ARCH = ["--model.input_shape=3,32,32", "--model.stages=4;4;8;8;8", "--model.fc_width=16"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "synth"
    code = main(["gen-synth", "--out", str(out), "--seed", "3", "--synth.identities=8", "--synth.images_per_identity=10",
                 "--synth.image_size=32", "--synth.attributes=3", "--synth.confusable_pairs=2"])
    assert code == 0
    return out


def train_args(synth_dir, out, *extra):
    return ["train", "--out", str(out), f"--data.manifest={synth_dir / 'manifest.csv'}", *SMALL_ARCH,
            "--train.epochs=2", "--train.batch_size=16", *extra]


def test_gen_synth_summary(synth_dir, capsys, tmp_path):
    assert len(load_dataset(synth_dir / "manifest.csv")) == 80
    main(["gen-synth", "--out", str(tmp_path / "x"), "--synth.identities=6", "--synth.confusable_pairs=3",
          "--synth.image_size=16", "--synth.images_per_identity=2"])
    assert "confusable pairs: 3" in capsys.readouterr().out


def test_gen_synth_same_seed_same_directory(tmp_path):
    args = ["--seed", "4", "--synth.identities=3", "--synth.images_per_identity=2", "--synth.image_size=8"]
    main(["gen-synth", "--out", str(tmp_path / "a"), *args])
    main(["gen-synth", "--out", str(tmp_path / "b"), *args])
    a = {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*") if p.is_file()}
    b = {p.relative_to(tmp_path / "b"): p.read_bytes() for p in (tmp_path / "b").rglob("*") if p.is_file()}
    assert a == b


def test_gen_synth_refuses_non_empty_dir(synth_dir):
    assert main(["gen-synth", "--out", str(synth_dir)]) == 1


def test_gen_synth_unknown_key(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path / "z"), "--synth.colour=3"]) == 1


def test_train_writes_one_row_per_iteration(synth_dir, tmp_path):
    assert main(train_args(synth_dir, tmp_path / "run")) == 0
    mf = read_metrics(tmp_path / "run" / "metrics.csv")
    # 8 identities x 8 training images = 64 samples, batch 16 -> 4 iterations per epoch
    assert len(mf.rows) == 8
    its = [(r["epoch"], r["iteration"]) for r in mf.rows]
    assert its == sorted(its)
    assert mf.columns[:5] == ["epoch", "iteration", "l1", "l2", "id_acc"]
    assert mf.columns[5:] == ["attr_acc:id0", "attr_acc:id1", "attr_acc:id2"]
    assert mf.config["model.scenario"] == "pa" and len(mf.fingerprint) == 64
    for name in ("checkpoint.fuse", "report.json", "timing.csv"):
        assert (tmp_path / "run" / name).is_file()


def test_npd_metrics_leave_attribute_columns_empty(synth_dir, tmp_path):
    main(train_args(synth_dir, tmp_path / "npd", "--model.scenario=npd", "--train.epochs=1"))
    rows = read_metrics(tmp_path / "npd" / "metrics.csv").rows
    assert all(r["l1"] is None and r["attr_acc:id0"] is None and r["l2"] is not None for r in rows)


def test_separate_run_has_no_identity_loss(synth_dir, tmp_path):
    main(train_args(synth_dir, tmp_path / "sep", "--train.separate=true", "--train.epochs=1"))
    rows = read_metrics(tmp_path / "sep" / "metrics.csv").rows
    assert all(r["l2"] is None and r["l1"] is not None for r in rows)


def test_train_is_deterministic(synth_dir, tmp_path):
    for name in ("a", "b"):
        assert main(train_args(synth_dir, tmp_path / name, "--seed", "5")) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.fuse").read_bytes() == (b / "checkpoint.fuse").read_bytes()


def test_config_errors_before_training(synth_dir, tmp_path):
    assert main(train_args(synth_dir, tmp_path / "bad", "--opt.alpah=1")) == 1
    assert not (tmp_path / "bad").exists()
    assert main(train_args(synth_dir, tmp_path / "bad2", "--model.input_shape=3,64,64")) == 1
    assert main(["train", "--out", str(tmp_path / "bad3"), "--data.manifest=/nonexistent.csv"]) == 1


def test_train_from_config_file(synth_dir, tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("\n".join([f"data.manifest={synth_dir / 'manifest.csv'}", "model.input_shape=3,32,32",
                               "model.stages=4;4;8;8;8", "model.fc_width=16", "train.epochs=1", "model.scenario=gt"]))
    assert main(["train", str(conf), "--out", str(tmp_path / "r")]) == 0
    assert json.loads((tmp_path / "r" / "report.json").read_text())["scenario"] == "gt"


def test_eval_scenario_mismatch_and_report(synth_dir, tmp_path, capsys):
    main(train_args(synth_dir, tmp_path / "npd", "--model.scenario=npd", "--train.epochs=1"))
    ckpt = str(tmp_path / "npd" / "checkpoint.fuse")
    assert main(["eval", ckpt, "--scenario", "gt"]) == 1
    assert "scenario" in capsys.readouterr().err
    assert main(["eval", ckpt, "--scenario", "npd", "--split", "train", "--out", str(tmp_path / "e.json")]) == 0
    report = json.loads((tmp_path / "e.json").read_text())
    assert report["split"] == "train" and report["n"] == 64 and report["fingerprint_match"]


def test_eval_rejects_corrupt_checkpoint(tmp_path):
    (tmp_path / "c.fuse").write_bytes(b"JUNKJUNKJUNK")
    assert main(["eval", str(tmp_path / "c.fuse"), "--scenario", "pa"]) == 1


def test_untrained_model_is_near_chance(synth_dir, tmp_path):
    from attrfuse.config import RunConfig
    from attrfuse.training import build_model, evaluate, prepare_data

    cfg = RunConfig.from_text("", {k[2:].split("=")[0]: k.split("=", 1)[1] for k in SMALL_ARCH}
                              | {"data.manifest": str(synth_dir / "manifest.csv"), "model.scenario": "npd"})
    data = prepare_data(cfg)
    accs = []
    for seed in range(5):
        cfg.run.seed = seed
        model = build_model(cfg, len(data.attr_names), 8)
        accs.append(evaluate(model, data.test, data.attr_names)["identity_accuracy"])
    # 16 test images, balanced 2 per identity: any constant predictor scores 1/8;
    # 99% binomial bounds for p = 1/8, n = 16 are [0, 0.4375]
    assert all(0.0 <= a <= 0.4375 for a in accs)
    assert np.mean(accs) < 0.3


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for op in ("affine", "conv2d", "maxpool2d", "relu", "softmax", "concat", "model/l1", "model/l2[pa]"):
        assert op in out


def test_gradcheck_detects_corrupted_backward(monkeypatch, capsys):
    real = T.maxpool2d

    def broken(x, window=2, stride=2):
        out = real(x, window, stride)
        if out._backward is not None:
            inner = out._backward
            out._backward = lambda g: tuple(0.5 * d for d in inner(g))
        return out

    monkeypatch.setattr(T, "maxpool2d", broken)
    assert main(["gradcheck"]) == 1
    assert "FAIL  maxpool2d" in capsys.readouterr().out


def test_compare_tables(synth_dir, tmp_path, capsys):
    runs = []
    for scen in ("npd", "gt", "pa"):
        main(train_args(synth_dir, tmp_path / scen, f"--model.scenario={scen}"))
        runs.append(str(tmp_path / scen))
    main(train_args(synth_dir, tmp_path / "sep", "--train.separate=true"))
    assert main(["compare", *runs, str(tmp_path / "sep"), "--out", str(tmp_path / "cmp")]) == 0
    header = (tmp_path / "cmp" / "convergence.csv").read_text().splitlines()[0].split(",")
    assert header == ["iteration", "npd-s0", "gt-s0", "pa-s0", "pa-separate-s0"]
    attrs = (tmp_path / "cmp" / "attributes.csv").read_text().splitlines()
    assert attrs[0] == "attribute,joint,separate,joint_minus_separate" and len(attrs) == 4
    long_rows = (tmp_path / "cmp" / "convergence_long.csv").read_text().splitlines()
    assert long_rows[0] == "run,iteration,metric,value" and len(long_rows) > 10
    assert "WARNING" not in capsys.readouterr().err


def test_compare_warns_on_dataset_mismatch(synth_dir, tmp_path, capsys):
    other = tmp_path / "other"
    main(["gen-synth", "--out", str(other), "--seed", "9", "--synth.identities=8", "--synth.images_per_identity=10",
          "--synth.image_size=32", "--synth.attributes=3"])
    main(train_args(synth_dir, tmp_path / "r1", "--train.epochs=1"))
    main(["train", "--out", str(tmp_path / "r2"), f"--data.manifest={other / 'manifest.csv'}", *SMALL_ARCH,
          "--train.epochs=1"])
    assert main(["compare", str(tmp_path / "r1"), str(tmp_path / "r2"), "--out", str(tmp_path / "c")]) == 0
    assert "different datasets" in capsys.readouterr().err
    assert "WARNING" in (tmp_path / "c" / "summary.txt").read_text()


def test_partial_metrics_file_is_parseable(tmp_path):
    text = "# model.scenario=pa\nepoch,iteration,l1,l2,id_acc\n1,1,0.5,0.7,0.1\n1,2,0.4\n"
    (tmp_path / "m.csv").write_text(text)
    assert len(read_metrics(tmp_path / "m.csv").rows) == 1
