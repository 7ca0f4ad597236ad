import json

import pytest

from numunits import cli
from numunits.pipeline import (
    STAGE_BY_NAME, ConfigError, Run, StageError, code_digest, load_config, parse_assignment,
    run_pipeline, run_stage, stage_is_current,
)

TINY = {
    "corpus": {"n_sentences": 2000},
    "model": {"embed_dim": 16, "hidden_dim": 16},
    "train": {"epochs": 2, "lr": 0.01},
    "data": {"n_per_condition": 40,
             "depth": {"min_len": 4, "max_len": 8, "sentences_per_length": 30, "position_range": [3, 4],
                       "depth_range": [2, 3], "points_per_cell": 10}},
    "analysis": {"n_random": 20, "trace_stimuli": 20},
}


def _files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and ".stages" not in p.parts}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def tiny_run(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    return run_pipeline(load_config(str(tiny_config)), out)


def test_parse_assignment():
    assert parse_assignment("train.lr=0.01") == {"train": {"lr": 0.01}}
    assert parse_assignment("out=runs/x") == {"out": "runs/x"}
    assert parse_assignment("data.tasks=[\"Simple\"]") == {"data": {"tasks": ["Simple"]}}
    with pytest.raises(ConfigError):
        parse_assignment("train.lr")


def test_config_precedence(tiny_config):
    assert load_config().train.epochs == 8
    assert load_config(str(tiny_config)).train.epochs == 2
    cfg = load_config(str(tiny_config), {"train": {"epochs": 5}})
    assert cfg.train.epochs == 5 and cfg.model.hidden_dim == 16
    args = cli.build_parser().parse_args(
        ["show-config", "--config", str(tiny_config), "--seed", "4", "--set", "train.epochs=3"])
    cfg = cli.resolve_config(args)
    assert (cfg.seed, cfg.train.epochs, cfg.corpus.n_sentences) == (4, 3, 2000)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, {"train": {"learning_rate": 1}})
    with pytest.raises(ConfigError):
        load_config(None, {"bogus": {}})
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    with pytest.raises(ConfigError):
        load_config(None, {"data": {"depth": {"nope": 1}}}).depth_config()


def test_portable_config_ignores_out_and_jobs():
    a = load_config(None, {"out": "a", "jobs": 1})
    b = load_config(None, {"out": "b", "jobs": 4})
    assert a.hash() == b.hash()
    assert a.hash() != load_config(None, {"seed": 1}).hash()


def test_pipeline_writes_report_and_records(tiny_run):
    root = tiny_run.root
    assert (root / "index.md").read_text().startswith("# numunits run report")
    summary = json.loads((root / "summary.json").read_text())
    assert set(summary["checks"]) == {"accuracy", "lr_units", "gat", "group_ablation", "efferents"}
    for f in summary["artifacts"]:
        assert (root / f).exists()
    for name in STAGE_BY_NAME:
        rec = json.loads((root / ".stages" / f"{name}.json").read_text())
        assert rec["seconds"] >= 0
        assert stage_is_current(tiny_run, STAGE_BY_NAME[name])
    vocab = (root / "data" / "vocab.txt").read_text().splitlines()
    assert vocab[0] == "<eos>"     # line number is the token id, no header
    prov = json.loads((root / "data" / "manifest.json").read_text())
    assert prov["provenance"]["seed"] == 0


def test_stages_skip_when_current(tiny_run, caplog):
    caplog.set_level("INFO")
    assert not run_stage(tiny_run, STAGE_BY_NAME["eval"])
    assert "up to date" in caplog.text
    assert run_stage(tiny_run, STAGE_BY_NAME["eval"], force=True)


def test_changed_output_invalidates_stage(tiny_run):
    st = STAGE_BY_NAME["eval"]
    p = tiny_run.root / "eval" / "accuracy.csv"
    original = p.read_bytes()
    p.write_bytes(original + b"x")
    assert not stage_is_current(tiny_run, st)
    assert run_stage(tiny_run, st)
    assert p.read_bytes() == original


def test_config_change_invalidates_downstream(tiny_run, tmp_path):
    cfg = tiny_run.config.merged({"analysis": {"threshold": 20.0}})
    other = Run(cfg, tiny_run.root)
    assert stage_is_current(other, STAGE_BY_NAME["train"])
    assert not stage_is_current(other, STAGE_BY_NAME["ablate"])


def test_code_digest_is_stable():
    assert code_digest() == code_digest() and len(code_digest()) == 16


@pytest.mark.slow
def test_byte_identical_across_directories(tiny_run, tiny_config, tmp_path):
    other = run_pipeline(load_config(str(tiny_config)), tmp_path / "b")
    a, b = _files(tiny_run.root), _files(other.root)
    assert a.keys() == b.keys()
    diff = [k for k in a if a[k] != b[k]]
    assert diff == []


def test_stage_error_names_stage(tmp_path):
    run = Run(load_config(None, {"out": str(tmp_path)}))
    with pytest.raises(StageError, match="train"):
        run_stage(run, STAGE_BY_NAME["train"])


def test_train_resume_matches_uninterrupted(tiny_run, tmp_path):
    import shutil

    from numunits.lstm import LanguageModel
    from numunits.pipeline import stage_train

    cfg = tiny_run.config
    run = Run(cfg, tmp_path)
    shutil.copytree(tiny_run.root / "data", tmp_path / "data")
    # interrupt after the first epoch checkpoint
    import numunits.pipeline as pl
    real = pl.train

    def one_epoch(model0, corpus, hyper, callback=None, resume=None, **kw):
        def cb(row, st):
            callback(row, st)
            raise KeyboardInterrupt
        return real(model0, corpus, hyper, callback=cb, resume=resume, **kw)

    pl.train = one_epoch
    try:
        with pytest.raises(KeyboardInterrupt):
            stage_train(run)
    finally:
        pl.train = real
    assert (tmp_path / "train" / "train_state.json").exists()
    stage_train(run)
    assert not (tmp_path / "train" / "train_state.json").exists()
    a = LanguageModel.load(tiny_run.root / "train" / "model.json")
    b = LanguageModel.load(tmp_path / "train" / "model.json")
    assert (a.w_out == b.w_out).all()
    assert (tiny_run.root / "train" / "log.csv").read_bytes() == (tmp_path / "train" / "log.csv").read_bytes()


def test_cli_exit_codes(tiny_run, tiny_config, tmp_path, capsys):
    assert cli.main(["show-config", "--config", str(tiny_config)]) == 0
    assert json.loads(capsys.readouterr().out)["corpus"]["n_sentences"] == 2000
    assert cli.main(["pipeline", "--dry-run", "--config", str(tiny_config)]) == 0
    out = capsys.readouterr().out
    assert "perm-test" in out and "config hash" in out
    assert not list(tmp_path.iterdir())
    assert cli.main(["show-config", "--set", "train.nope=1"]) == 2
    assert cli.main(["eval", "--out", str(tmp_path / "empty")]) == 3
    assert "needs" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "data": {**TINY["data"], "tasks": ["NoSuchTask"]}}))
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "bad")]) in (2, 3)
    assert cli.main(["eval", "--config", str(tiny_config), "--out", str(tiny_run.root),
                     "--mask", "L9-U1"]) == 2
    assert cli.main(["eval", "--config", str(tiny_config), "--out", str(tiny_run.root),
                     "--mask", "L2-U1,L2-U2"]) == 0
    ab = json.loads((tiny_run.root / "eval" / "accuracy_ablated.json").read_text())
    assert ab["mask"] == "L2-U1,L2-U2"


def test_cli_stage_failure_exit_code(tiny_run, tiny_config, tmp_path, monkeypatch):
    import numunits.pipeline as pl

    def boom(run):
        raise RuntimeError("synthetic failure")
    monkeypatch.setitem(pl.STAGE_BY_NAME, "eval", pl.Stage("eval", boom, ("analysis",), ("train",), "x"))
    assert cli.main(["eval", "--config", str(tiny_config), "--out", str(tiny_run.root), "--force"]) == 5


def test_cli_external_checkpoint(tiny_run, tiny_config, tmp_path):
    import shutil

    shutil.copytree(tiny_run.root / "data", tmp_path / "data")
    (tmp_path / ".stages").mkdir()
    shutil.copy(tiny_run.root / ".stages" / "gen-data.json", tmp_path / ".stages")
    ckpt = tmp_path / "external.json"
    shutil.copy(tiny_run.root / "train" / "model.json", ckpt)
    base = ["--config", str(tiny_config), "--out", str(tmp_path)]
    assert cli.main(["eval", *base]) == 3
    assert cli.main(["eval", *base, "--checkpoint", str(tmp_path / "missing.json")]) == 3
    assert cli.main(["pipeline", *base, "--checkpoint", str(ckpt)]) == 2
    assert cli.main(["eval", *base, "--checkpoint", str(ckpt)]) == 0
    rel = "eval/accuracy.json"
    assert (tmp_path / rel).read_bytes() == (tiny_run.root / rel).read_bytes()
    assert not stage_is_current(Run(tiny_run.config, tmp_path), STAGE_BY_NAME["train"])
