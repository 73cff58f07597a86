import csv

import numpy as np
import pytest

from latentshift import cli, codec, images
from latentshift.config import ConfigError, RunConfig, parse_config

from test_codec import TINY


def test_parse_config_values():
    cfg = parse_config("seed = 7\nlambdas = 0.1, 0.2  # two points\n\n# comment\ncheckpoint_dir = ck\n")
    assert cfg.seed == 7 and cfg.lambdas == (0.1, 0.2) and cfg.checkpoint_dir == "ck"
    assert cfg.iterations == RunConfig().iterations


@pytest.mark.parametrize("text", ["bogus_key = 1", "seed = seven", "step_table_version = 1", "no equals sign"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def scaled_main_latent(model, s, lam, index):
    """Same codec with the main latent scaled by ``s``: finer effective quantisation, more bits."""
    from dataclasses import replace

    p = model.params()
    p["g_a.4.w"], p["g_a.4.b"] = p["g_a.4.w"] * s, p["g_a.4.b"] * s
    p["g_s.0.w"] = p["g_s.0.w"] / s
    p["h_a.0.w"] = p["h_a.0.w"] / s
    return replace(model.with_params(p), lam=lam, lambda_index=index)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    ck, pics = root / "ck", root / "pics"
    ck.mkdir()
    pics.mkdir()
    rng = np.random.default_rng(0)
    train_pics = [np.kron(rng.uniform(0, 1, (6, 6, 3)), np.ones((8, 8, 1))) for _ in range(2)]
    cfg = codec.TrainConfig(iterations=80, learning_rate=5e-3, batch_size=2, crop=32, arch=TINY)
    base = codec.train(cfg, train_pics, 0.01).model
    for k, lam in enumerate((0.003, 0.01, 0.03, 0.1)):
        scaled_main_latent(base, 2.0**k, lam, k).save(ck / f"model_{k}.ckpt")
    img = (np.kron(rng.uniform(0, 1, (4, 4, 3)), np.ones((16, 16, 1))) * 255).astype(np.uint8)
    images.write_image(pics / "one.ppm", img)
    conf = root / "run.cfg"
    conf.write_text(f"checkpoint_dir = {ck}\neval_dir = {pics}\neval_crop = 128\n")
    return root, conf, pics / "one.ppm"


def test_encode_decode_no_shift(workspace):
    root, conf, img = workspace
    stream = root / "one.gsls"
    assert cli.main(["encode", str(img), "--config", str(conf), "--no-shift", "--lambda-index", "1", "--out", str(stream)]) == 0
    out = root / "one_dec.ppm"
    assert cli.main(["decode", str(stream), "--config", str(conf), "--out", str(out)]) == 0
    model = codec.CodecModel.load(root / "ck" / "model_1.ckpt")
    x = images.to_float(images.read_image(img))
    expected = codec.encode_with_details(x, model, shift_enabled=False)
    assert stream.read_bytes() == expected.stream_bytes
    assert expected.stream.rho_f_index == expected.stream.rho_h_index == 0
    from latentshift.latent_shift import image8

    np.testing.assert_array_equal(images.read_image(out), image8(codec.reconstruct(expected, model)))


def test_eval_single_row(workspace):
    root, conf, _ = workspace
    out = root / "ev"
    assert cli.main(["eval", "--config", str(conf), "--lambda-index", "0", "--no-shift", "--out", str(out)]) == 0
    with open(out / "rd_records.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["mode"] == "baseline"


def test_eval_full_table_deterministic(workspace):
    root, conf, _ = workspace
    for name in ("a", "b"):
        assert cli.main(["eval", "--config", str(conf), "--out", str(root / name)]) == 0
    with open(root / "a" / "bd_rate.csv") as fh:
        table = {r["mode"]: float(r["bd_rate_percent"]) for r in csv.DictReader(fh)}
    assert table["baseline"] == 0.0
    assert (root / "a" / "bd_rate.csv").read_bytes() == (root / "b" / "bd_rate.csv").read_bytes()


def test_analyze_and_complexity(workspace):
    root, conf, _ = workspace
    out = root / "an"
    assert cli.main(["analyze", "--config", str(conf), "--lambda-index", "2", "--out", str(out)]) == 0
    assert (out / "kkt.csv").exists() and (out / "histogram.csv").exists()
    assert cli.main(["complexity", "--config", str(conf), "--finetune-iters", "3", "--repeats", "1", "--out", str(out)]) == 0
    with open(out / "complexity.csv") as fh:
        rows = dict(csv.reader(fh))
    assert rows["extra_synthesis_passes"] == "8" and rows["extra_gradient_passes"] == "2"


def test_exit_codes(workspace, tmp_path):
    root, conf, img = workspace
    assert cli.main(["encode"]) == cli.EXIT_CONFIG
    assert cli.main(["encode", str(img), "--bogus"]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown = 1\n")
    assert cli.main(["eval", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["eval", "--config", str(conf), "--checkpoints", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["encode", str(tmp_path / "missing.ppm"), "--config", str(conf)]) == cli.EXIT_DATA
    odd = tmp_path / "odd.ppm"
    images.write_image(odd, np.zeros((40, 64, 3), np.uint8))
    assert cli.main(["encode", str(odd), "--config", str(conf)]) == cli.EXIT_DATA
    junk = tmp_path / "junk.gsls"
    junk.write_bytes(b"not a stream at all")
    assert cli.main(["decode", str(junk), "--config", str(conf)]) == cli.EXIT_FORMAT
