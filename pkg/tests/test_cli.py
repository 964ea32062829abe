import csv
import subprocess
import sys

import numpy as np
import pytest

from clips import band_frame, make_frame, pan_clip, smoothing_models, static_clip
from uvc import nnlf
from uvc.cli import main
from uvc.codec import SequenceHeader, model_hash
from uvc.core import load_yuv420, save_yuv420


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    save_yuv420(pan_clip(64, 64, 3), d / "pan.yuv")
    save_yuv420([make_frame(band_frame(), t) for t in range(2)], d / "band.yuv")
    for i, m in enumerate(smoothing_models()):
        nnlf.save_weights(m, d / f"m{i}.nnlf")
    return d


def _weights(d):
    return ",".join(str(d / f"m{i}.nnlf") for i in range(12))


def _encode(d, out, *extra):
    return main(["encode", "--input", str(d / "pan.yuv"), "--width", "64", "--height", "64",
                 "--qp", "32", "--gop", "ld", "--out", str(out), *extra])


def test_encode_writes_stream_and_stats(workdir, capsys):
    out = workdir / "s.uvc"
    assert _encode(workdir, out) == 0
    assert out.read_bytes()[:4] == b"UVC1"
    with open(str(out) + ".csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["poc"]) for r in rows] == [0, 1, 2]
    assert set(rows[0]) >= {"poc", "layer", "qp_effective_mean", "bits", "psnr_y", "psnr_u", "psnr_v"}
    assert sum(int(r["bits"]) for r in rows) < 8 * len(out.read_bytes())
    assert "encoded 3 frames" in capsys.readouterr().out


def test_qp_out_of_range(workdir, capsys):
    assert _encode(workdir, workdir / "bad.uvc", "--qp", "60") == 2
    err = capsys.readouterr().err
    assert "qp" in err and "[0,51]" in err


def test_tools_reach_the_header(workdir):
    for tools, flags in (("none", (False, False, False)), ("uqt,bim", (True, False, True)),
                         ("uqt,nnlf,bim", (True, True, True))):
        out = workdir / f"t_{tools.replace(',', '_')}.uvc"
        assert _encode(workdir, out, "--tools", tools, "--weights", _weights(workdir)) == 0
        hdr, _ = SequenceHeader.parse(out.read_bytes())
        assert (hdr.uqt, hdr.nnlf, hdr.bim) == flags


def test_unknown_tool(workdir, capsys):
    assert _encode(workdir, workdir / "x.uvc", "--tools", "uqt,alf") == 2
    assert "alf" in capsys.readouterr().err


def test_decode_matches_encoder(workdir, capsys):
    out = workdir / "d.uvc"
    assert _encode(workdir, out, "--tools", "uqt,nnlf,bim", "--weights", _weights(workdir),
                   "--recon", str(workdir / "enc_recon.yuv")) == 0
    yuv = workdir / "d.yuv"
    md5 = workdir / "d.md5"
    assert main(["decode", "--input", str(out), "--out", str(yuv), "--weights", _weights(workdir),
                 "--md5", str(md5), "--check-stats", str(out) + ".csv"]) == 0
    assert "md5 verified for 3 frames" in capsys.readouterr().out
    assert yuv.read_bytes() == (workdir / "enc_recon.yuv").read_bytes()
    assert len(md5.read_text().splitlines()) == 3


@pytest.fixture(scope="module")
def plain_stream(workdir):
    out = workdir / "plain.uvc"
    assert _encode(workdir, out) == 0
    return out


def test_decode_reports_mismatch(plain_stream, tmp_path):
    out = plain_stream
    stats = tmp_path / "wrong.csv"
    text = (plain_stream.parent / "plain.uvc.csv").read_text().splitlines()
    cols = text[1].split(",")
    cols[-1] = "0" * 32
    stats.write_text("\n".join([text[0], ",".join(cols)] + text[2:]) + "\n")
    assert main(["decode", "--input", str(out), "--out", str(tmp_path / "o.yuv"),
                 "--check-stats", str(stats)]) == 1


def test_missing_weights_name_the_hash(workdir, capsys):
    out = workdir / "w.uvc"
    assert _encode(workdir, out, "--tools", "nnlf", "--weights", _weights(workdir)) == 0
    assert main(["decode", "--input", str(out), "--out", str(workdir / "w.yuv")]) == 2
    err = capsys.readouterr().err
    assert model_hash(smoothing_models()[0]).hex() in err


def test_corrupt_stream_reports_offset(plain_stream, capsys, tmp_path):
    data = bytearray(plain_stream.read_bytes())
    data[len(data) // 2] ^= 0x10
    bad = tmp_path / "bad.uvc"
    bad.write_bytes(bytes(data))
    assert main(["decode", "--input", str(bad), "--out", str(tmp_path / "o.yuv")]) == 2
    assert "offset" in capsys.readouterr().err


def test_help_exits_zero():
    for args in (["--help"], ["encode", "--help"], ["ablate", "--help"]):
        r = subprocess.run([sys.executable, "-m", "uvc", *args], capture_output=True, text=True)
        assert r.returncode == 0 and "usage" in r.stdout


def test_config_file_and_precedence(workdir, tmp_path):
    cfg = tmp_path / "enc.cfg"
    cfg.write_text(f"# encode settings\ninput = {workdir / 'pan.yuv'}\nwidth = 64\nheight = 64\n"
                   f"qp = 40\ngop = intra\nsearch-range = 4\nout = {tmp_path / 'cfg.uvc'}\n")
    assert main(["encode", "--config", str(cfg)]) == 0
    hdr, _ = SequenceHeader.parse((tmp_path / "cfg.uvc").read_bytes())
    assert (hdr.qp, hdr.gop, hdr.search_range) == (40, "intra", 4)
    assert main(["encode", "--config", str(cfg), "--qp", "30"]) == 0
    hdr, _ = SequenceHeader.parse((tmp_path / "cfg.uvc").read_bytes())
    assert (hdr.qp, hdr.gop) == (30, "intra")


def test_unknown_config_key(workdir, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("qp = 30\nquality = high\n")
    assert main(["encode", "--config", str(cfg), "--input", str(workdir / "pan.yuv"), "--width", "64",
                 "--height", "64", "--out", str(tmp_path / "o.uvc")]) == 2
    err = capsys.readouterr().err
    assert "quality" in err and ":2:" in err


def test_missing_input_is_caught_before_work(tmp_path, capsys):
    assert main(["encode", "--input", str(tmp_path / "nope.yuv"), "--width", "64", "--height", "64",
                 "--out", str(tmp_path / "o.uvc")]) == 2
    assert "input" in capsys.readouterr().err
    assert not (tmp_path / "o.uvc").exists()


def test_encode_is_deterministic(workdir, tmp_path):
    a, b = tmp_path / "a.uvc", tmp_path / "b.uvc"
    for out in (a, b):
        assert _encode(workdir, out, "--tools", "uqt,bim") == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.uvc.csv").read_text() == (tmp_path / "b.uvc.csv").read_text()


def test_metrics_command(tmp_path, capsys):
    rd = tmp_path / "rd.csv"
    lines = ["label,component,bitrate_kbps,psnr_db"]
    for label, k in (("anchor", 1.0), ("test", 0.9)):
        for c in "yuv":
            lines += [f"{label},{c},{r * k},{p}" for r, p in ((100, 30), (200, 33), (400, 36), (800, 39))]
    rd.write_text("\n".join(lines) + "\n")
    report = tmp_path / "rep.csv"
    assert main(["metrics", "--input", str(rd), "--report", str(report)]) == 0
    assert "-10.000" in capsys.readouterr().out
    row = list(csv.DictReader(open(report)))[0]
    assert float(row["bd_yuv"]) == pytest.approx(-10.0, abs=1e-6)


def _ablate(d, tmp_path, clip, toolsets, *extra):
    report = tmp_path / "rep.csv"
    rc = main(["ablate", "--input", str(d / clip), "--width", "64", "--height", "64", "--gop", "intra",
               "--toolsets", toolsets, "--report", str(report), "--rd-csv", str(tmp_path / "rd.csv"), *extra])
    assert rc == 0
    return {r["label"]: r for r in csv.DictReader(open(report))}


def test_ablate_anchor_against_itself(workdir, tmp_path):
    rows = _ablate(workdir, tmp_path, "pan.yuv", "none", "--frames", "1")
    r = rows["anchor-rerun"]
    assert all(float(r[k]) == 0.0 for k in ("bd_y", "bd_u", "bd_v", "bd_yuv"))


def test_ablate_uqt_on_band_clip(workdir, tmp_path):
    rows = _ablate(workdir, tmp_path, "band.yuv", "uqt")
    r = rows["anchor+uqt"]
    assert float(r["bd_y"]) <= 0
    want = (6 * float(r["bd_y"]) + float(r["bd_u"]) + float(r["bd_v"])) / 8
    assert float(r["bd_yuv"]) == pytest.approx(want, abs=1e-5)
    rd = list(csv.DictReader(open(tmp_path / "rd.csv")))
    assert len(rd) == 2 * 3 * 5


def test_ablate_needs_four_qps(workdir, tmp_path, capsys):
    assert main(["ablate", "--input", str(workdir / "pan.yuv"), "--width", "64", "--height", "64",
                 "--qps", "22,27,32"]) == 2
    assert "at least 4" in capsys.readouterr().err


def test_train_writes_loadable_weights(workdir, tmp_path, capsys):
    out = tmp_path / "luma.nnlf"
    assert main(["train", "--input", str(workdir / "pan.yuv"), "--width", "64", "--height", "64",
                 "--frames", "1", "--gop", "intra", "--qps", "37", "--steps", "3", "--out", str(out)]) == 0
    model = nnlf.load_weights(out)
    assert model.component == nnlf.LUMA and model.slice_type == nnlf.INTRA
    assert model_hash(model).hex() in capsys.readouterr().out
    assert main(["train", "--input", str(workdir / "pan.yuv"), "--width", "64", "--height", "64",
                 "--gop", "intra", "--slice", "inter", "--steps", "1", "--out", str(out)]) == 2


def test_decoded_file_has_all_frames(workdir, tmp_path):
    out = tmp_path / "r.uvc"
    assert _encode(workdir, out) == 0
    assert main(["decode", "--input", str(out), "--out", str(tmp_path / "r.yuv")]) == 0
    frames = load_yuv420(tmp_path / "r.yuv", 64, 64)
    assert len(frames) == 3
    assert np.abs(frames[0].y.data.astype(int) - pan_clip(64, 64, 3)[0].y.data).mean() < 10
