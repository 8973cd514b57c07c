import json
import os
import struct

import numpy as np
import pytest

from xattn_ptq import cli, tensorfile
from xattn_ptq.config import ConfigError, RunConfig, from_mapping, load

SMALL = ["--calib_samples", "4", "--steps", "3", "--n_blocks", "1"]


def _run(capsys, *argv):
    rc = cli.main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


# --- tensor files ------------------------------------------------------------------


@pytest.mark.parametrize("dtype,np_dtype", [("f32", np.float32), ("f64", np.float64)])
def test_tensorfile_round_trip(tmp_path, dtype, np_dtype):
    a = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np_dtype)
    p = tmp_path / "a.cart"
    tensorfile.write_tensor(p, a, dtype)
    b = tensorfile.read_tensor(p)
    assert b.dtype == np_dtype
    np.testing.assert_array_equal(a, b)
    assert tensorfile.read_header(p) == (dtype, (3, 4, 5))


def test_tensorfile_layout_is_bit_exact():
    buf = tensorfile.encode(np.array([[1.0, 2.0]]), "f32")
    assert buf[:4] == b"CART"
    assert buf[4:8] == bytes([1, 0, 2, 0])
    assert struct.unpack("<2I", buf[8:16]) == (1, 2)
    assert buf[16:] == struct.pack("<2f", 1.0, 2.0)


def test_tensorfile_scalar():
    assert tensorfile.decode(tensorfile.encode(np.float64(2.5))).shape == ()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"CARX" + b[4:],
        lambda b: b[:4] + bytes([2]) + b[5:],
        lambda b: b[:5] + bytes([7]) + b[6:],
        lambda b: b[:7] + bytes([1]) + b[8:],
        lambda b: b[:-1],
        lambda b: b + b"\0",
        lambda b: b[:6],
    ],
    ids=["magic", "version", "dtype", "pad", "short", "long", "truncated"],
)
def test_tensorfile_rejects_bad_bytes(mutate):
    buf = tensorfile.encode(np.arange(6.0).reshape(2, 3))
    with pytest.raises(tensorfile.TensorFormatError):
        tensorfile.decode(mutate(buf))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    tensorfile.atomic_write_bytes(tmp_path / "x.bin", b"abc")
    assert os.listdir(tmp_path) == ["x.bin"]


# --- config ----------------------------------------------------------------------


def test_config_defaults_and_validation():
    cfg = RunConfig()
    assert cfg.calib_samples == 32 and cfg.lambda_threshold == 0.1
    for bad in ({"bits_w": 1}, {"bits_a": 17}, {"lambda_threshold": 0.0}, {"n_blocks": 0}, {"d_model": 30, "n_heads": 4}):
        with pytest.raises(ConfigError):
            from_mapping(bad)


def test_config_unknown_key_is_error():
    with pytest.raises(ConfigError, match="unknown config keys: colour"):
        from_mapping({"colour": "red"})


def test_config_type_errors():
    with pytest.raises(ConfigError):
        from_mapping({"steps": 2.5})
    with pytest.raises(ConfigError):
        from_mapping({"mac_enabled": "maybe"})
    assert from_mapping({"steps": "7", "mac_enabled": "false"}).steps == 7


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "steps": 10}))
    cfg = load(p, {"steps": "4"})
    assert (cfg.seed, cfg.steps) == (3, 4)


def test_jcar_off_degrades_joint_pair():
    assert RunConfig(jcar_enabled=False).reconstruction().granularity == "per-module"
    assert RunConfig(jcar_enabled=False, granularity="per-block").effective_granularity == "per-block"
    assert RunConfig().reconstruction().granularity == "joint-pair"


def test_cli_unknown_config_key_exit_1(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 0, "bogus": 1}))
    rc, _, err = _run(capsys, "generate", "--config", str(p), "--output_dir", str(tmp_path / "run"))
    assert rc == 1
    assert "bogus" in err
    assert not (tmp_path / "run").exists()


def test_cli_unknown_flag_exit_1(capsys):
    rc, _, err = _run(capsys, "quantize", "--bogus", "1")
    assert rc == 1 and "config error" in err


# --- verbs -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert cli.main(["generate", "--output_dir", str(d), *SMALL]) == 0
    return d


def _files(d):
    out = {}
    for root, _, names in os.walk(d):
        for n in names:
            with open(os.path.join(root, n), "rb") as fh:
                out[os.path.relpath(os.path.join(root, n), d)] = fh.read()
    return out


def test_generate_is_byte_identical(tmp_path, run_dir):
    assert cli.main(["generate", "--output_dir", str(tmp_path), *SMALL]) == 0
    a = {k: v for k, v in _files(run_dir).items() if k.startswith("checkpoint")}
    assert a == _files(tmp_path)


def test_generate_headers_match_config(run_dir):
    ck = run_dir / "checkpoint"
    assert tensorfile.read_header(ck / "calib.tokens.cart") == ("f64", (4, 8, 32))
    assert tensorfile.read_header(ck / "calib.image.cart") == ("f64", (4, 64, 32))
    assert tensorfile.read_header(ck / "blocks.0.mlp.lin1.w.cart")[1] == (32, 64)


def test_generate_token_range_wider_than_image(run_dir):
    ck = run_dir / "checkpoint"
    t = tensorfile.read_tensor(ck / "calib.tokens.cart")
    i = tensorfile.read_tensor(ck / "calib.image.cart")
    assert t.max() - t.min() > i.max() - i.min()


def test_quantize_report(run_dir, capsys):
    rc, out, _ = _run(capsys, "quantize", "--output_dir", str(run_dir), *SMALL)
    assert rc == 0 and "report.json" in out
    rep = json.loads((run_dir / "report.json").read_text())
    assert rep["schema"] == cli.REPORT_SCHEMA
    assert rep["stage_log"][0] == "calibrate"
    assert [c["branch"] for c in rep["compensation"]] == ["q", "k", "v"]
    assert [c["layer"] for c in rep["compensation"]] == [f"blocks.0.i2t.{b}_proj" for b in "qkv"]
    assert [len(t["stages"]) for t in rep["reconstruction"]] == [1, 3]
    assert set(rep["evaluation"]) >= {"calib_final_composite", "eval_final_composite"}
    lines = (run_dir / "traces.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 3
    assert json.loads(lines[0]).keys() == {"job", "step", "loss"}


def test_quantize_flags_off(tmp_path, run_dir, capsys):
    out_dir = tmp_path / "abl"
    out_dir.mkdir()
    os.symlink(run_dir / "checkpoint", out_dir / "checkpoint")
    rc, _, _ = _run(capsys, "quantize", "--output_dir", str(out_dir), *SMALL,
                    "--mac_enabled", "false", "--jcar_enabled", "false")
    assert rc == 0
    rep = json.loads((out_dir / "report.json").read_text())
    assert rep["compensation"] == []
    assert rep["granularity"] == "per-module"
    assert len(rep["reconstruction"]) == 4


def test_quantize_is_reproducible(tmp_path, run_dir, capsys):
    out_dir = tmp_path / "again"
    out_dir.mkdir()
    os.symlink(run_dir / "checkpoint", out_dir / "checkpoint")
    assert _run(capsys, "quantize", "--output_dir", str(out_dir), *SMALL)[0] == 0
    assert _run(capsys, "quantize", "--output_dir", str(run_dir), *SMALL)[0] == 0
    a = json.loads((run_dir / "report.json").read_text())
    b = json.loads((out_dir / "report.json").read_text())
    a["config"].pop("output_dir")
    b["config"].pop("output_dir")
    assert cli.numeric_payload(a) == cli.numeric_payload(b)


def test_quantize_missing_checkpoint_exit_2(tmp_path, capsys):
    rc, _, err = _run(capsys, "quantize", "--output_dir", str(tmp_path / "nothing"), *SMALL)
    assert rc == 2 and "i/o error" in err


def test_quantize_dim_mismatch_exit_1(run_dir, capsys):
    rc, _, err = _run(capsys, "quantize", "--output_dir", str(run_dir), *SMALL[:4], "--n_blocks", "2")
    assert rc == 1 and "dims" in err


def test_quantize_divergence_exit_3_without_report(tmp_path, run_dir, capsys):
    out_dir = tmp_path / "bad"
    out_dir.mkdir()
    os.symlink(run_dir / "checkpoint", out_dir / "checkpoint")
    rc, _, err = _run(capsys, "quantize", "--output_dir", str(out_dir), *SMALL, "--lr_scale", "1e6")
    assert rc == 3
    assert err.startswith("stage failed: reconstruct:")
    assert not (out_dir / "report.json").exists()


def test_corrupt_tensor_exit_2(tmp_path, run_dir, capsys):
    import shutil

    out_dir = tmp_path / "corrupt"
    shutil.copytree(run_dir / "checkpoint", out_dir / "checkpoint")
    f = out_dir / "checkpoint" / "blocks.0.mlp.lin1.w.cart"
    f.write_bytes(f.read_bytes()[:-8])
    rc, _, err = _run(capsys, "quantize", "--output_dir", str(out_dir), *SMALL)
    assert rc == 2 and "payload" in err


def test_analyze_surrogate(tmp_path, run_dir, capsys):
    out_dir = tmp_path / "an"
    out_dir.mkdir()
    os.symlink(run_dir / "checkpoint", out_dir / "checkpoint")
    rc, _, _ = _run(capsys, "analyze", "--output_dir", str(out_dir), *SMALL, "--linear_surrogate", "true")
    assert rc == 0
    text = (out_dir / "analysis.json").read_text()
    rep = json.loads(text)
    assert json.loads(json.dumps(rep)) == rep
    (th,) = rep["theorem"]
    assert [s["eps"] for s in th["eps_sweep"]] == [1e-2, 1e-3, 1e-4]
    assert all(s["relative_residual"] <= 1e-10 for s in th["eps_sweep"])
    (co,) = rep["corollary"]
    assert co["detached_all_zero"] and co["max_rel_error"] <= 1e-4
    assert len(rep["oscillation"]["modules"]) == 4


def test_report_verb(run_dir, capsys):
    assert _run(capsys, "quantize", "--output_dir", str(run_dir), *SMALL)[0] == 0
    rc, out, _ = _run(capsys, "report", "--output_dir", str(run_dir))
    assert rc == 0
    assert "granularity       joint-pair" in out
    assert "mac blocks.0.i2t" in out


def test_report_verb_nothing_to_show(tmp_path, capsys):
    rc, _, err = _run(capsys, "report", "--output_dir", str(tmp_path))
    assert rc == 2
