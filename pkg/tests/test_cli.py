import csv
import io
import json

import pytest

from dynlora import cli
from dynlora.model import load, save

from .helpers import small_config, trained_like

SMALL = "n_blocks=2\nd_model=16\nd_hidden=24\nvocab=40\nn_experts=4\nrank=4\nseed=5\n"


@pytest.fixture
def model_file(tmp_path):
    path = tmp_path / "m.bin"
    save(trained_like(small_config(), std=0.3), path)
    return str(path)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def payload(out):
    head, _, body = out.partition("\n")
    assert head.startswith("# dynlora ") and "created=" in head
    return body


def test_read_kv(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\n a = 1 \n\nb=x  # trailing\n")
    assert cli.read_kv(str(p)) == {"a": "1", "b": "x"}


@pytest.mark.parametrize("text,match", [("nokey\n", "key=value"), ("a=1\na=2\n", "duplicate")])
def test_read_kv_rejects(tmp_path, text, match):
    p = tmp_path / "c.cfg"
    p.write_text(text)
    with pytest.raises(cli.UsageError, match=match):
        cli.read_kv(str(p))


@pytest.mark.parametrize("v,expect", [("true", True), ("0", False), ("Yes", True), ("off", False)])
def test_parse_bool(v, expect):
    assert cli.parse_bool(v) is expect


def test_gen_is_reproducible(tmp_path, capsys):
    cfg = tmp_path / "g.cfg"
    cfg.write_text(SMALL + "up_init_std=0.1\n")
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert run(capsys, "gen", "--config", str(cfg), "--out", str(a))[0] == 0
    assert run(capsys, "gen", "--config", str(cfg), "--out", str(b))[0] == 0
    assert a.read_bytes() == b.read_bytes()
    m = load(a)
    assert m.config.d_hidden == 24 and any(e.up.any() for s in m.adapted_sites() for e in s.experts)


def test_gen_seed_flag_overrides_config(tmp_path, capsys):
    cfg = tmp_path / "g.cfg"
    cfg.write_text(SMALL)
    run(capsys, "gen", "--config", str(cfg), "--out", str(tmp_path / "a.bin"), "--seed", "9")
    assert load(tmp_path / "a.bin").config.seed == 9


def test_decode_payload_is_reproducible(model_file, capsys):
    args = ("decode", "--model", model_file, "--n-queries", "2", "--n-new", "6", "--format", "json")
    _, a, _ = run(capsys, *args)
    _, b, _ = run(capsys, *args)
    assert payload(a) == payload(b)
    data = json.loads(payload(a))
    assert data["mode"] == "FusedSwitch" and [len(g) for g in data["generations"]] == [6, 6]


def test_decode_generations_agree_across_pre_gated_modes(model_file, capsys, tmp_path):
    gens = []
    for mode in ("PreGatedNaive", "SimpleMerge", "FusedSwitch"):
        out = tmp_path / f"{mode}.json"
        run(capsys, "decode", "--model", model_file, "--mode", mode, "--n-queries", "3", "--n-new", "8",
            "--generations", str(out))
        gens.append(json.loads(out.read_text()))
    assert gens[0] == gens[1] == gens[2]


def test_decode_csv_to_file(model_file, capsys, tmp_path):
    out = tmp_path / "log.csv"
    code, stdout, _ = run(capsys, "decode", "--model", model_file, "--n-queries", "1", "--n-new", "3",
                          "--format", "csv", "--out", str(out))
    assert code == 0 and stdout == ""
    rows = list(csv.DictReader(io.StringIO(payload(out.read_text()))))
    assert {r["kind"] for r in rows} >= {"BackboneGemm", "RouterGemm", "SgmmDispatch"}


def test_flags_override_config(model_file, capsys, tmp_path):
    cfg = tmp_path / "r.cfg"
    cfg.write_text("n_queries=1\nn_new=3\nmode=SimpleMerge\n")
    _, out, _ = run(capsys, "decode", "--config", str(cfg), "--model", model_file, "--mode", "PreGatedNaive",
                    "--format", "json")
    data = json.loads(payload(out))
    assert data["mode"] == "PreGatedNaive" and len(data["generations"]) == 1


def test_check_passes_on_healthy_model(model_file, capsys):
    code, out, _ = run(capsys, "check", "--model", model_file, "--n-queries", "2", "--n-new", "10", "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(payload(out))))
    assert code == 0
    assert [r["suite"] for r in rows] == ["equivalence", "roundtrip", "sign-regression", "sgmm-determinism"]
    assert all(r["result"] == "PASS" for r in rows)


def test_check_seeds_factors_for_fresh_model(tmp_path, capsys):
    path = tmp_path / "z.bin"
    save(trained_like(small_config(), std=0.0), path)
    code, out, _ = run(capsys, "check", "--model", str(path), "--n-queries", "1", "--n-new", "3")
    assert code == 0 and "seeded up factors" in out


def test_check_exits_1_on_failure(model_file, capsys, monkeypatch):
    real = cli.switching.restore

    def literal_restore(model, state, profiler=None, opts=None, *, negate_both=False):
        return real(model, state, profiler, opts, negate_both=True)

    monkeypatch.setattr(cli.switching, "restore", literal_restore)
    code, out, _ = run(capsys, "check", "--model", model_file, "--n-queries", "1", "--n-new", "3")
    assert code == 1 and "FAIL" in out


def test_bench_no_wall_is_reproducible(model_file, capsys):
    args = ("bench", "--model", model_file, "--n-queries", "1", "--n-new", "5", "--no-wall", "--format", "json")
    _, a, _ = run(capsys, *args)
    _, b, _ = run(capsys, *args)
    assert payload(a) == payload(b)
    rows = json.loads(payload(a))["rows"]
    assert [r["mode"] for r in rows][:2] == ["Backbone", "NaivePerSite"]
    over = {r["mode"]: r["overhead_pct"] for r in rows}
    assert over["NaivePerSite"] > over["PreGatedNaive"] > over["SimpleMerge"] > over["FusedSwitch"] > 0
    assert "wall_us_per_token" not in rows[0]


def test_bench_with_wall(model_file, capsys):
    code, out, _ = run(capsys, "bench", "--model", model_file, "--n-queries", "1", "--n-new", "3",
                       "--modes", "FusedSwitch", "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(payload(out))))
    assert code == 0 and [r["mode"] for r in rows] == ["Backbone", "FusedSwitch"]
    assert float(rows[1]["wall_us_per_token"]) > 0


def test_profile_table(model_file, capsys):
    code, out, _ = run(capsys, "profile", "--model", model_file, "--mode", "SimpleMerge", "--n-queries", "1",
                       "--n-new", "4")
    assert code == 0 and "MergeGemm" in out and "counts ok" in out


def test_ablate_grid(capsys):
    code, out, _ = run(capsys, "ablate", "--format", "json")
    rows = json.loads(payload(out))["rows"]
    assert code == 0 and len(rows) == 2 * 4 * 2 * 5
    fused = [r for r in rows if r["mode"] == "FusedSwitch"]
    assert all(r["sgmm"] == 1 and r["adapter"] == 0 for r in fused)


def test_train_writes_model_and_report(model_file, capsys, tmp_path):
    out, rep = tmp_path / "t.bin", tmp_path / "r.json"
    code, _, err = run(capsys, "train", "--model", model_file, "--steps", "5", "--learning-rate", "0.001",
                       "--out", str(out), "--report", str(rep))
    assert code == 0 and out.exists() and "dominant shares" in err
    assert json.loads(rep.read_text())["steps"] == 5


def test_train_divergence_exits_1(model_file, capsys, tmp_path):
    out = tmp_path / "t.bin"
    code, _, err = run(capsys, "train", "--model", model_file, "--steps", "5", "--learning-rate", "1e12",
                       "--out", str(out))
    assert code == 1 and "diverged" in err and not out.exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["decode"],
        ["decode", "--model", "m.bin", "--tile", "3"],
        ["decode", "--model", "m.bin", "--mode", "Turbo"],
        ["decode", "--model", "m.bin", "--seed", "-1"],
        ["decode", "--model", "m.bin", "--inject-delay", "maybe"],
        ["decode", "--model", "m.bin", "--workers", "0"],
        ["decode", "--model", "m.bin", "--throughput-gflops", "0"],
        ["gen", "--out", "x.bin"],
        ["nosuch"],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        code = cli.main(argv)
        raise SystemExit(code)
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert err.strip() and len(err.strip().splitlines()) <= 3


def test_unknown_config_key_is_usage_error(model_file, capsys, tmp_path):
    cfg = tmp_path / "b.cfg"
    cfg.write_text("bogus=1\n")
    code, _, err = run(capsys, "decode", "--model", model_file, "--config", str(cfg))
    assert code == 2 and "bogus" in err


def test_invalid_model_config_is_usage_error(capsys, tmp_path):
    cfg = tmp_path / "g.cfg"
    cfg.write_text("rank=999\n")
    code, _, err = run(capsys, "gen", "--config", str(cfg), "--out", str(tmp_path / "x.bin"))
    assert code == 2 and "rank" in err and len(err.strip().splitlines()) == 1


@pytest.mark.parametrize("content", [None, b"garbage"])
def test_io_errors_exit_3_and_name_path(tmp_path, capsys, content):
    path = tmp_path / "m.bin"
    if content is not None:
        path.write_bytes(content)
    code, _, err = run(capsys, "profile", "--model", str(path))
    assert code == 3 and str(path) in err


def test_unwritable_output_exits_3(model_file, capsys, tmp_path):
    bad = str(tmp_path / "missing" / "out.txt")
    code, _, err = run(capsys, "ablate", "--out", bad)
    assert code == 3 and bad in err
