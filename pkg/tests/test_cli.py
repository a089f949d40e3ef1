import json
from dataclasses import fields

import pytest

from tatrack.cli import build_config, main, read_config_file
from tatrack.tracker import TrackerConfig


def run(*argv):
    return main([str(a) for a in argv])


class TestParsing:
    def test_help_exits_zero(self, capsys):
        assert run("--help") == 0

    def test_subcommand_help(self, capsys):
        assert run("track", "--help") == 0

    def test_unknown_flag(self, capsys):
        assert run("synth", "--out", "x", "--definitely-not-a-flag") == 2

    def test_missing_subcommand(self, capsys):
        assert run() == 2


class TestConfigPrecedence:
    def test_file_overrides_default(self, tmp_path):
        cfg_file = tmp_path / "t.cfg"
        cfg_file.write_text("k_conv43=100\nwindow_influence=0.05\n# comment\n\n")
        overrides = read_config_file(cfg_file)
        assert overrides == {"k_conv43": 100, "window_influence": 0.05}

    def test_flag_beats_file_beats_default(self, tmp_path):
        cfg_file = tmp_path / "t.cfg"
        cfg_file.write_text("k_conv43=100\nk_conv41=40\n")

        class Args:
            config = str(cfg_file)
            k_conv43 = 55  # explicit flag
            seed = None

        args = Args()
        for f in fields(TrackerConfig):
            if not hasattr(args, f.name):
                setattr(args, f.name, None)
        cfg = build_config(args)
        assert cfg.k_conv43 == 55  # flag wins
        assert cfg.k_conv41 == 40  # file wins over default
        assert cfg.search_factor == TrackerConfig().search_factor  # default

    def test_every_field_settable_from_file(self, tmp_path):
        lines = [
            "k_conv43=10", "k_conv41=11", "search_factor=2.5",
            "scale_factors=0.9,1.0,1.1", "scale_penalties=0.9,1.0,1.1",
            "template_feat_min=3", "template_feat_max=12",
            "window_influence=0.2", "ridge_lambda=0.01", "ridge_lr=0.001",
            "rank_lr=0.002", "loss_threshold=0.1", "max_iters=9",
            "rank_scales=0.8,1.0,1.2", "ablation=rand", "abs_importance=true",
            "seed=5",
        ]
        cfg_file = tmp_path / "f.cfg"
        cfg_file.write_text("\n".join(lines))

        class Args:
            config = str(cfg_file)
            seed = None

        args = Args()
        for f in fields(TrackerConfig):
            if not hasattr(args, f.name):
                setattr(args, f.name, None)
        cfg = build_config(args)
        assert cfg.k_conv43 == 10 and cfg.k_conv41 == 11
        assert cfg.scale_factors == (0.9, 1.0, 1.1)
        assert cfg.ablation == "rand" and cfg.seed == 5 and cfg.abs_importance

    def test_unknown_key_rejected(self, tmp_path):
        cfg_file = tmp_path / "t.cfg"
        cfg_file.write_text("velocity=9\n")
        with pytest.raises(ValueError):
            read_config_file(cfg_file)


class TestSynthCommand:
    def test_layout_and_counts(self, tmp_path):
        out = tmp_path / "seq"
        assert run("synth", "--out", out, "--kind", "translate", "--frames", 7, "--seed", 3) == 0
        frames = sorted((out / "img").glob("*.png"))
        gt = (out / "groundtruth_rect.txt").read_text().splitlines()
        assert len(frames) == 7 and len(gt) == 7

    def test_same_seed_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("synth", "--out", out, "--kind", "clutter", "--frames", 3, "--seed", 9) == 0
        for fa, fb in zip(sorted((a / "img").glob("*")), sorted((b / "img").glob("*"))):
            assert fa.read_bytes() == fb.read_bytes()
        assert (a / "groundtruth_rect.txt").read_bytes() == (b / "groundtruth_rect.txt").read_bytes()

    def test_zoom_areas_grow(self, tmp_path):
        out = tmp_path / "z"
        assert run("synth", "--out", out, "--kind", "zoom", "--frames", 12, "--seed", 0) == 0
        areas = []
        for line in (out / "groundtruth_rect.txt").read_text().splitlines():
            x, y, w, h = (float(v) for v in line.split(","))
            areas.append(w * h)
        assert all(b >= a for a, b in zip(areas, areas[1:]))
        assert areas[-1] > areas[0]

    def test_bad_kind(self, capsys, tmp_path):
        assert run("synth", "--out", tmp_path / "x", "--kind", "spiral") == 2


class TestTrackCommand:
    def test_box_file_line_count(self, tmp_path, weights_file, small_seq_dir):
        out = tmp_path / "boxes.txt"
        assert run("track", "--weights", weights_file, "--sequence", small_seq_dir, "--out", out) == 0
        assert len(out.read_text().splitlines()) == 6

    def test_missing_weights_exit_and_message(self, tmp_path, small_seq_dir, capsys):
        missing = tmp_path / "nope.tadtw"
        code = run("track", "--weights", missing, "--sequence", small_seq_dir, "--out", tmp_path / "b.txt")
        assert code == 3
        assert str(missing) in capsys.readouterr().err

    def test_corrupt_weights_validation_exit(self, tmp_path, small_seq_dir):
        bad = tmp_path / "bad.tadtw"
        bad.write_bytes(b"XXXXXX" + b"\0" * 64)
        code = run("track", "--weights", bad, "--sequence", small_seq_dir, "--out", tmp_path / "b.txt")
        assert code == 4

    def test_byte_identical_reruns(self, tmp_path, weights_file, small_seq_dir):
        outs = []
        for name in ("one.txt", "two.txt"):
            out = tmp_path / name
            assert run("track", "--weights", weights_file, "--sequence", small_seq_dir, "--out", out) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    from tatrack.synth import make_sequence, write_sequence

    root = tmp_path_factory.mktemp("dataset")
    for i, kind in enumerate(("translate", "clutter")):
        imgs, boxes = make_sequence(kind, 3, seed=i, height=96, width=112, target_size=32)
        write_sequence(root / f"{kind}{i}", imgs, boxes)
    return root


class TestEvalCommand:
    def test_empty_dataset(self, tmp_path, weights_file):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run("eval", "--weights", weights_file, "--dataset", empty, "--out", tmp_path / "r") == 3

    def test_two_sequences_and_rerun_identical(self, tmp_path, weights_file, dataset):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            assert run("eval", "--weights", weights_file, "--dataset", dataset, "--out", out) == 0
        csv = (out1 / "summary.csv").read_text().splitlines()
        assert len(csv) == 4 and csv[-1].startswith("aggregate,")

        def stable(path):
            report = json.loads((path / "report.json").read_text())
            for seq in report["sequences"]:
                seq.pop("fps")
            return report

        assert stable(out1) == stable(out2)

    def test_jobs_flag_matches_serial(self, tmp_path, weights_file, dataset):
        out1, out2 = tmp_path / "serial", tmp_path / "par"
        assert run("eval", "--weights", weights_file, "--dataset", dataset, "--out", out1) == 0
        assert run("eval", "--weights", weights_file, "--dataset", dataset, "--out", out2, "--jobs", 2) == 0
        a = json.loads((out1 / "report.json").read_text())
        b = json.loads((out2 / "report.json").read_text())
        assert [s["boxes"] for s in a["sequences"]] == [s["boxes"] for s in b["sequences"]]


class TestImportanceCommand:
    def test_dump_structure_and_full_selection(self, tmp_path, weights_file, small_seq_dir):
        frame = sorted((small_seq_dir / "img").glob("*.png"))[0]
        gt_line = (small_seq_dir / "groundtruth_rect.txt").read_text().splitlines()[0]
        out = tmp_path / "imp.json"
        assert run(
            "importance", "--weights", weights_file, "--frame", frame,
            "--bbox", gt_line, "--out", out, "--k-conv43", 512, "--k-conv41", 512,
        ) == 0
        data = json.loads(out.read_text())
        assert set(data) == {"conv4_1", "conv4_3"}
        for tap in data.values():
            assert len(tap) == 512
            assert all(e["selected"] for e in tap)
            assert [e["channel"] for e in tap] == list(range(512))

    def test_selected_count_honors_k(self, tmp_path, weights_file, small_seq_dir):
        frame = sorted((small_seq_dir / "img").glob("*.png"))[0]
        gt_line = (small_seq_dir / "groundtruth_rect.txt").read_text().splitlines()[0]
        out = tmp_path / "imp.json"
        assert run(
            "importance", "--weights", weights_file, "--frame", frame,
            "--bbox", gt_line, "--out", out, "--k-conv43", 30, "--k-conv41", 20,
        ) == 0
        data = json.loads(out.read_text())
        assert sum(e["selected"] for e in data["conv4_3"]) == 30
        assert sum(e["selected"] for e in data["conv4_1"]) == 20

    def test_repeat_invocations_identical(self, tmp_path, weights_file, small_seq_dir):
        frame = sorted((small_seq_dir / "img").glob("*.png"))[0]
        gt_line = (small_seq_dir / "groundtruth_rect.txt").read_text().splitlines()[0]
        dumps = []
        for name in ("a.json", "b.json"):
            out = tmp_path / name
            assert run("importance", "--weights", weights_file, "--frame", frame,
                       "--bbox", gt_line, "--out", out) == 0
            dumps.append(out.read_bytes())
        assert dumps[0] == dumps[1]


class TestRenderCommand:
    def test_mismatched_line_count(self, tmp_path, small_seq_dir):
        boxes = tmp_path / "short.txt"
        boxes.write_text("1,1,10,10\n")
        assert run("render", "--sequence", small_seq_dir, "--boxes", boxes, "--out", tmp_path / "o") == 4

    def test_output_frame_count_and_gt_flag(self, tmp_path, small_seq_dir):
        boxes = small_seq_dir / "groundtruth_rect.txt"
        out_plain = tmp_path / "plain"
        out_gt = tmp_path / "gt"
        assert run("render", "--sequence", small_seq_dir, "--boxes", boxes, "--out", out_plain) == 0
        assert run("render", "--sequence", small_seq_dir, "--boxes", boxes, "--out", out_gt, "--gt") == 0
        assert len(list(out_plain.glob("*.png"))) == 6
        # gt overlay changes at least one pixel somewhere
        diff = any(
            (out_plain / p.name).read_bytes() != p.read_bytes() for p in out_gt.glob("*.png")
        )
        assert diff

    def test_featmap_requires_weights(self, tmp_path, small_seq_dir, capsys):
        boxes = small_seq_dir / "groundtruth_rect.txt"
        assert run("render", "--sequence", small_seq_dir, "--boxes", boxes,
                   "--out", tmp_path / "o", "--featmap", "conv4_3") == 2

    def test_featmap_outputs(self, tmp_path, weights_file, small_seq_dir):
        boxes = small_seq_dir / "groundtruth_rect.txt"
        out = tmp_path / "fm"
        assert run("render", "--sequence", small_seq_dir, "--boxes", boxes, "--out", out,
                   "--featmap", "conv4_3", "--weights", weights_file) == 0
        assert len(list(out.glob("featmap_*.png"))) == 6
