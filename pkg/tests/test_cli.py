import subprocess
import sys

import pytest

from auxcodec import cli
from auxcodec.config import save_config
from auxcodec.container import HEADER_SIZE, read_header
from auxcodec.metrics import RDPoint, read_rd_csv, write_rd_csv
from auxcodec.model import CodecModel
from auxcodec.ppm import read_ppm, write_ppm
from auxcodec.train import TrainState

from conftest import TINY, smooth_image


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    img = smooth_image(64, 64, seed=21)
    write_ppm(root / "fixture.ppm", img)
    model = CodecModel(TINY)
    model.round_to_float32()
    model.save(root / "toy.bin")
    save_config(TINY, root / "toy.cfg")
    return root


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def encode(capsys, work, name="x.aifc", *extra):
    return run(capsys, "encode", "--input", work / "fixture.ppm", "--weights", work / "toy.bin",
               "--config", work / "toy.cfg", "--output", work / name, *extra)


class TestEncodeDecode:
    def test_encode_verify_report(self, capsys, work):
        code, out, _ = encode(capsys, work, "x.aifc", "--verify", "--report")
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "roundtrip=exact"
        fields = lines[1].split(",")
        assert len(fields) == 5
        size = (work / "x.aifc").stat().st_size
        assert float(fields[0]) == pytest.approx(8 * size / 64**2, abs=1e-6)
        assert float(fields[1]) > 0
        assert int(fields[2]) + int(fields[3]) == size - HEADER_SIZE
        assert 0 < float(fields[4]) < 1

    def test_report_without_verify_leaves_psnr_empty(self, capsys, work):
        code, out, _ = encode(capsys, work, "r.aifc", "--report")
        assert code == 0
        assert out.strip().split(",")[1] == ""

    def test_decode_verify(self, capsys, work):
        encode(capsys, work, "d.aifc")
        code, out, _ = run(capsys, "decode", "--input", work / "d.aifc", "--weights", work / "toy.bin",
                           "--output", work / "d.ppm", "--verify", work / "fixture.ppm")
        assert code == 0 and out.strip() == "roundtrip=exact"
        assert read_ppm(work / "d.ppm").shape == (64, 64, 3)

    def test_encode_is_byte_stable(self, capsys, work):
        encode(capsys, work, "a.aifc")
        encode(capsys, work, "b.aifc")
        assert (work / "a.aifc").read_bytes() == (work / "b.aifc").read_bytes()

    def test_missing_weights(self, capsys, work):
        code, _, err = run(capsys, "encode", "--input", work / "fixture.ppm", "--weights",
                           work / "nope.bin", "--output", work / "n.aifc")
        assert code == cli.EXIT_MISSING
        assert "nope.bin" in err

    def test_missing_input(self, capsys, work):
        code, _, err = run(capsys, "encode", "--input", work / "gone.ppm", "--weights",
                           work / "toy.bin", "--output", work / "n.aifc")
        assert code == 2 and "gone.ppm" in err

    def test_config_mismatch(self, capsys, work):
        save_config(TINY.replace(n_p=2), work / "other.cfg")
        code, _, err = run(capsys, "encode", "--input", work / "fixture.ppm", "--weights",
                           work / "toy.bin", "--config", work / "other.cfg", "--output", work / "m.aifc")
        assert code == cli.EXIT_MISMATCH
        assert "n_p" in err

    def test_bad_config_file(self, capsys, work):
        (work / "broken.cfg").write_text("no_such_key = 3\n")
        code, _, err = run(capsys, "encode", "--input", work / "fixture.ppm", "--weights",
                           work / "toy.bin", "--config", work / "broken.cfg", "--output", work / "m.aifc")
        assert code == 2 and "no_such_key" in err

    def test_decode_with_other_weights(self, capsys, work):
        encode(capsys, work, "w.aifc")
        CodecModel(TINY.replace(seed=5)).save(work / "other.bin")
        code, _, _ = run(capsys, "decode", "--input", work / "w.aifc", "--weights", work / "other.bin",
                         "--output", work / "w.ppm")
        assert code == cli.EXIT_MISMATCH

    def test_decode_truncated(self, capsys, work):
        encode(capsys, work, "t.aifc")
        data = (work / "t.aifc").read_bytes()
        (work / "t.aifc").write_bytes(data[:-3])
        code, _, err = run(capsys, "decode", "--input", work / "t.aifc", "--weights", work / "toy.bin",
                           "--output", work / "t.ppm")
        assert code == cli.EXIT_MISMATCH and "truncated" in err

    def test_unknown_flag_rejected(self, capsys, work):
        with pytest.raises(SystemExit) as exc:
            cli.main(["inspect", "--input", str(work / "x.aifc"), "--bogus"])
        assert exc.value.code != 0


class TestInspect:
    def test_fresh_header(self, capsys, work):
        encode(capsys, work, "i.aifc")
        code, out, _ = run(capsys, "inspect", "--input", work / "i.aifc")
        assert code == 0
        lengths = [int(line.split(": ")[1].split()[0]) for line in out.splitlines()
                   if line.startswith("stream ")]
        assert len(lengths) == 4 and all(n > 0 for n in lengths)
        header = read_header((work / "i.aifc").read_bytes())
        assert f"payload={sum(lengths)}" in out and sum(lengths) == header.payload_size
        assert "width=64 height=64" in out and "checksum=ok" in out

    def test_corrupted_byte(self, capsys, work):
        encode(capsys, work, "c.aifc")
        data = bytearray((work / "c.aifc").read_bytes())
        data[-2] ^= 0x10
        (work / "c.aifc").write_bytes(bytes(data))
        code, _, err = run(capsys, "inspect", "--input", work / "c.aifc")
        assert code == cli.EXIT_MISMATCH and "Checksum" in err

    def test_version_mismatch(self, capsys, work):
        encode(capsys, work, "v.aifc")
        data = bytearray((work / "v.aifc").read_bytes())
        data[4] = 99
        (work / "v.aifc").write_bytes(bytes(data))
        code, _, err = run(capsys, "inspect", "--input", work / "v.aifc")
        assert code == cli.EXIT_MISMATCH and "version" in err.lower()

    def test_bad_magic(self, capsys, work):
        (work / "junk.aifc").write_bytes(b"JUNK" + bytes(60))
        code, _, err = run(capsys, "inspect", "--input", work / "junk.aifc")
        assert code == cli.EXIT_MISMATCH and "magic" in err


class TestTrain:
    def test_seeded_runs_are_byte_stable(self, capsys, work):
        outputs = []
        for tag in "ab":
            code, out, _ = run(capsys, "train", "--config", work / "toy.cfg", "--output",
                               work / f"t{tag}.bin", "--steps", 3, "--patches", 2, "--seed", 4,
                               "--trace", work / f"t{tag}.csv", "--checkpoint", work / f"t{tag}.npz")
            assert code == 0 and out.startswith("steps=3 ")
            outputs.append(((work / f"t{tag}.csv").read_bytes(), (work / f"t{tag}.bin").read_bytes()))
        assert outputs[0] == outputs[1]
        trace = outputs[0][0].decode().splitlines()
        assert trace[0].startswith("step,loss,bpp,mse") and len(trace) == 4
        assert TrainState.load(work / "ta.npz").step == 3
        assert CodecModel.load(work / "ta.bin").cfg == TINY

    def test_missing_config(self, capsys, work):
        code, _, _ = run(capsys, "train", "--config", work / "absent.cfg", "--output", work / "x.bin")
        assert code == 2


def curve(scale=1.0, shift=0.0):
    return [RDPoint(scale * r, q + shift, lam) for r, q, lam in
            [(0.1, 30.0, 0.0025), (0.2, 32.5, 0.005), (0.4, 35.0, 0.01), (0.8, 37.0, 0.02)]]


class TestCurves:
    def test_bd_rate_identical(self, capsys, tmp_path):
        write_rd_csv(tmp_path / "a.csv", curve())
        code, out, _ = run(capsys, "bd-rate", "--anchor", tmp_path / "a.csv", "--test", tmp_path / "a.csv")
        assert code == 0 and out == "0.00\n"

    def test_bd_rate_ninety_percent(self, capsys, tmp_path):
        write_rd_csv(tmp_path / "a.csv", curve())
        write_rd_csv(tmp_path / "b.csv", curve(scale=0.9))
        code, out, _ = run(capsys, "bd-rate", "--anchor", tmp_path / "a.csv", "--test", tmp_path / "b.csv")
        assert code == 0 and out == "-10.00\n"

    def test_bd_rate_no_overlap(self, capsys, tmp_path):
        write_rd_csv(tmp_path / "a.csv", curve())
        write_rd_csv(tmp_path / "b.csv", curve(shift=30.0))
        code, _, _ = run(capsys, "bd-rate", "--anchor", tmp_path / "a.csv", "--test", tmp_path / "b.csv")
        assert code == cli.EXIT_NO_OVERLAP

    def test_bd_rate_malformed(self, capsys, tmp_path):
        write_rd_csv(tmp_path / "a.csv", curve())
        (tmp_path / "bad.csv").write_text("bpp,psnr_db,lambda\n0.1,30,0.01\n0.2,x,0.02\n")
        code, _, err = run(capsys, "bd-rate", "--anchor", tmp_path / "a.csv", "--test", tmp_path / "bad.csv")
        assert code == 2 and ":3:" in err

    def test_eval_curve(self, capsys, work, tmp_path):
        images = tmp_path / "imgs"
        images.mkdir()
        for k in range(2):
            write_ppm(images / f"img{k}.ppm", smooth_image(64, 64, seed=50 + k))
        CodecModel(TINY.replace(seed=8)).save(tmp_path / "second.bin")
        (tmp_path / "weights.txt").write_text(
            f"# lambda, weights\n0.02,second.bin\n0.005,{work / 'toy.bin'}\n")
        outs = []
        for tag in "ab":
            code, _, _ = run(capsys, "eval-curve", "--inputs", images, "--weights-list",
                             tmp_path / "weights.txt", "--out", tmp_path / f"{tag}.csv")
            assert code == 0
            outs.append((tmp_path / f"{tag}.csv").read_bytes())
        assert outs[0] == outs[1]
        pts = read_rd_csv(tmp_path / "a.csv")
        assert [p.lam for p in pts] == [0.005, 0.02]
        assert all(p.bpp > 0 and p.psnr_db > 0 for p in pts)

    def test_eval_curve_empty_dir(self, capsys, tmp_path):
        (tmp_path / "w.txt").write_text("0.01,x.bin\n")
        code, _, _ = run(capsys, "eval-curve", "--inputs", tmp_path, "--weights-list",
                         tmp_path / "w.txt", "--out", tmp_path / "o.csv")
        assert code == 2


def test_console_entry_point():
    result = subprocess.run([sys.executable, "-m", "auxcodec.cli", "--help"],
                            capture_output=True, text=True)
    assert result.returncode == 0
    for name in ("encode", "decode", "inspect", "train", "eval-curve", "bd-rate"):
        assert name in result.stdout
