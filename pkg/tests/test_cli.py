import json

import numpy as np
import pytest

from satcodec.bitstream import read_bitstream, read_ppm, write_ppm
from satcodec.cli import EXIT_BITSTREAM, EXIT_INPUT, EXIT_OK, EXIT_RANGE_DECODE, EXIT_USAGE, EXIT_WEIGHTS, main


def events(capsys) -> list[dict]:
    return [json.loads(line) for line in capsys.readouterr().err.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Stage-1 and stage-2 weights from a few steps of training on a tiny synthetic set."""
    d = tmp_path_factory.mktemp("cli")
    common = ["--num-images", "2", "--size", "16", "--steps", "2", "--batch-size", "2"]
    assert main(["train-stage1", *common, "--width", "8", "--hyper", "4", "--lambda-index", "2", "--out", str(d / "s1.csmw")]) == EXIT_OK
    assert main(["train-stage2", *common, "--weights", str(d / "s1.csmw"), "--out", str(d / "full.csmw"), "--log", str(d / "s2.jsonl")]) == EXIT_OK
    img = np.random.default_rng(0).random((3, 24, 40))
    (d / "img.ppm").write_bytes(write_ppm(img))
    (d / "img.meta").write_text("gsd = 0.4\nsun_elevation = 35\n")
    return d


def test_compress_decompress(workdir, capsys):
    capsys.readouterr()
    w = str(workdir / "full.csmw")
    code = main(["compress", str(workdir / "img.ppm"), "--metadata", str(workdir / "img.meta"), "--weights", w, "--out", str(workdir / "img.csmc")])
    assert code == EXIT_OK
    (ev,) = events(capsys)
    assert ev["event"] == "compress" and ev["lambda_index"] == 2 and ev["width"] == 40
    assert read_bitstream((workdir / "img.csmc").read_bytes()).metadata[2] == 0.4
    outs = []
    for flags in ([], ["--no-compensation"], ["--no-metadata"], []):
        out = workdir / f"dec{len(outs)}.ppm"
        assert main(["decompress", str(workdir / "img.csmc"), "--weights", w, "--steps", "2", "--out", str(out), *flags]) == EXIT_OK
        outs.append(out.read_bytes())
    assert read_ppm(outs[0]).shape == (3, 24, 40)
    assert outs[0] == outs[3]
    assert outs[0] != outs[1]
    (dec,) = events(capsys)[-1:]
    assert dec["event"] == "decompress" and dec["compensation"] is True


def test_failure_exit_codes(workdir, capsys):
    w = str(workdir / "full.csmw")
    assert main(["decompress", str(workdir / "img.ppm"), "--weights", w]) == EXIT_BITSTREAM
    assert events(capsys)[-1]["category"] == "bad-magic"
    data = (workdir / "img.csmc").read_bytes()
    (workdir / "trail.csmc").write_bytes(data + b"\x00")
    assert main(["decompress", str(workdir / "trail.csmc"), "--weights", w]) == EXIT_BITSTREAM
    assert events(capsys)[-1]["category"] == "trailing"
    bs = read_bitstream(data)
    if len(bs.main) > 1:
        garbled = data[: len(data) - len(bs.main) + 1] + bytes(b ^ 0xA5 for b in bs.main[1:])
        (workdir / "garbled.csmc").write_bytes(garbled)
        code = main(["decompress", str(workdir / "garbled.csmc"), "--weights", w, "--no-compensation"])
        assert code in (EXIT_OK, EXIT_RANGE_DECODE)
    assert main(["compress", str(workdir / "nope.ppm"), "--weights", w]) == EXIT_INPUT
    assert main(["compress", str(workdir / "img.ppm"), "--weights", str(workdir / "nope.csmw")]) == EXIT_WEIGHTS
    assert main(["compress", str(workdir / "img.ppm"), "--weights", w, "--lambda-index", "0"]) == EXIT_WEIGHTS
    (workdir / "bad.meta").write_text("cloud_cover = 1.5\n")
    assert main(["compress", str(workdir / "img.ppm"), "--weights", w, "--metadata", str(workdir / "bad.meta")]) == EXIT_INPUT
    assert events(capsys)[-1]["category"] == "metadata"
    with pytest.raises(SystemExit) as exc:
        main(["compress", str(workdir / "img.ppm"), "--weights", w, "--lambda-index", "9"])
    assert exc.value.code == EXIT_USAGE


def test_training_log_is_json_lines(workdir):
    lines = [json.loads(s) for s in (workdir / "s2.jsonl").read_text().splitlines()]
    assert lines[-1]["step"] == 2 and lines[-1]["frozen_grad_norm"] == 0.0


def test_tile_eval_and_eval(workdir, capsys):
    w = str(workdir / "full.csmw")
    big = np.random.default_rng(1).random((3, 34, 50))
    (workdir / "big.ppm").write_bytes(write_ppm(big))
    capsys.readouterr()
    assert main(["tile-eval", str(workdir / "big.ppm"), "--weights", w, "--tile-size", "16", "--steps", "1", "--whole", "--out", str(workdir / "big.csmt")]) == EXIT_OK
    rows = events(capsys)
    assert [r["mode"] for r in rows] == ["tile", "whole"]
    assert main(["decompress", str(workdir / "big.csmt"), "--weights", w, "--steps", "1", "--out", str(workdir / "big_dec.ppm")]) == EXIT_OK
    ev = events(capsys)[-1]
    assert (ev["container"], ev["rows"], ev["cols"]) == ("tiles", 2, 3)
    assert read_ppm((workdir / "big_dec.ppm").read_bytes()).shape == (3, 32, 48)
    data = workdir / "ds"
    data.mkdir()
    assert main(["eval", str(data), "--weights", w]) == EXIT_OK
    (data / "a.ppm").write_bytes(write_ppm(big[:, :32, :32]))
    assert main(["eval", str(data), "--weights", w, "--no-compensation", "--out", str(workdir / "rd.jsonl")]) == EXIT_OK
    assert len((workdir / "rd.jsonl").read_text().splitlines()) == 1


def test_flops_command(capsys):
    assert main(["flops"]) == EXIT_OK
    ev = events(capsys)[-1]
    assert ev["encoder_ratio"] >= 2.5
    assert ev["total_gflops"] == pytest.approx(2 * ev["total_macs"] / 1e9)
    assert main(["flops", "--input-positions"]) == EXIT_OK
    assert events(capsys)[-1]["total_macs"] < ev["total_macs"]
