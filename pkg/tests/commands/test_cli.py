import filecmp
import json
import os
import re
import shutil
import tempfile
import unittest

import numpy as np
import pytest
import torch
import yaml

import msfreg
import regctl
from msfreg import data
from msfreg.checkpoint import save_checkpoint
from msfreg.model.network import FusionPyramidNet, ModelConfig
from msfreg.model.volgrid import DisplacementField, Volume

SHAPE = [32, 48, 32]
TINY_MODEL = {"encoder_channels": [2, 3, 4, 4, 5], "aux_decoder_channels": [4, 3, 3, 2, 2], "msfb_local_kernel": 3}


def write_config(file_name, **sections):
    values = {"model": dict(TINY_MODEL), "data": {"target_shape": SHAPE},
              "optimizer": {"iterations": 10, "checkpoint_every": 5, "learning_rate": 1e-3}}
    for section, overrides in sections.items():
        values.setdefault(section, {}).update(overrides)
    with open(file_name, "w") as fp:
        yaml.safe_dump(values, fp)
    return file_name


def read_lines(file_name):
    with open(file_name, "r") as fp:
        return fp.read().splitlines()


class CliTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = cls._tmp.name
        cls.bench = os.path.join(cls.tmp, "bench")
        assert regctl.main(["synth", "--out", cls.bench, "--count", "3", "--shape", *map(str, SHAPE),
                            "--max-disp", "2", "--seed", "1"]) == regctl.EXIT_OK
        cls.manifest = os.path.join(cls.bench, "manifest.json")
        cls.config = write_config(os.path.join(cls.tmp, "run.yaml"))

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()

    def tearDown(self):
        msfreg.use_deterministic(False)

    def path(self, *names):
        return os.path.join(self.tmp, *names)

    def tiny_checkpoint(self, name, head_init=True):
        torch.manual_seed(0)
        model = FusionPyramidNet(ModelConfig(head_init=head_init, **TINY_MODEL))
        # keep random fields within a few voxels
        with torch.no_grad():
            for head in (model.coarse_head, *model.heads):
                head.weight.mul_(0.1)
                head.bias.mul_(0.1)
        save_checkpoint(self.path(name), model)
        return self.path(name)


class TestSynth(CliTestCase):
    def test_manifest(self):
        index = data.load_index(self.manifest)
        self.assertEqual(6, len(index))
        self.assertEqual(["case_000", "case_001", "case_002"], [p.pair_id for p in index.pairs])
        self.assertTrue(all(os.path.isfile(p.field) for p in index.pairs))

    def test_true_field_round_trip(self):
        stored = data.load_field(os.path.join(self.bench, "case_001_field.nii"))
        case = data.make_synthetic(SHAPE, 2.0, rng_seed=[1, 1])
        self.assertTrue(torch.equal(case.true_field.vectors, stored.vectors))

    def test_byte_identical_regeneration(self):
        """
        Test that the same seed regenerates identical files.
        """
        again = self.path("again")
        self.assertEqual(regctl.EXIT_OK, regctl.main(["synth", "--out", again, "--count", "3",
                                                      "--shape", *map(str, SHAPE), "--max-disp", "2",
                                                      "--seed", "1"]))
        names = sorted(os.listdir(self.bench))
        self.assertEqual(names, sorted(os.listdir(again)))
        _, mismatch, errors = filecmp.cmpfiles(self.bench, again, names, shallow=False)
        self.assertEqual([], mismatch + errors)

    def test_validation_split(self):
        out = self.path("split")
        self.assertEqual(regctl.EXIT_OK, regctl.main(["synth", "--out", out, "--count", "3", "--validation", "1",
                                                      "--shape", "16", "16", "16"]))
        self.assertEqual(2, len(data.load_index(os.path.join(out, "manifest.json")).pairs))
        validation = data.load_index(os.path.join(out, "validation.json"))
        self.assertEqual("validation", validation.split)
        self.assertEqual(["case_002"], [p.pair_id for p in validation.pairs])


class TestTrain(CliTestCase):
    def train(self, out, *extra):
        return regctl.main(["train", "--config", self.config, "--manifest", self.manifest, "--out", out,
                            "--seed", "0", *extra])

    def test_outputs(self):
        """
        Test the loss log, checkpoints, plot and config snapshot of a short run.
        """
        out = self.path("train")
        self.assertEqual(regctl.EXIT_OK, self.train(out))
        records = [json.loads(line) for line in read_lines(os.path.join(out, "losses.jsonl"))]
        self.assertEqual(list(range(1, 11)), [r["iteration"] for r in records])
        for record in records:
            self.assertEqual({"iteration", "ncc_full", "ncc_half", "reg", "total"}, set(record))
            self.assertTrue(all(np.isfinite(v) for v in record.values()))
        self.assertTrue(os.path.isfile(os.path.join(out, "checkpoint.pt")))
        self.assertTrue(os.path.isfile(os.path.join(out, "checkpoints", "iter_000005.pt")))
        self.assertTrue(os.path.isfile(os.path.join(out, "loss_curve.png")))
        with open(os.path.join(out, "config.yaml"), "r") as fp:
            snapshot = yaml.safe_load(fp)
        self.assertEqual({"alpha": 0.7, "beta": 0.3, "lambda": 1.0},
                         {k: snapshot["loss"][k] for k in ("alpha", "beta", "lambda")})
        self.assertEqual(SHAPE, snapshot["data"]["target_shape"])

    def test_deterministic_runs(self):
        first, second = self.path("det1"), self.path("det2")
        self.assertEqual(regctl.EXIT_OK, self.train(first, "--deterministic"))
        self.assertEqual(regctl.EXIT_OK, self.train(second, "--deterministic"))
        self.assertEqual(read_lines(os.path.join(first, "losses.jsonl")),
                         read_lines(os.path.join(second, "losses.jsonl")))

    def test_resume_from_checkpoint(self):
        checkpoint = self.tiny_checkpoint("resume.pt")
        self.assertEqual(regctl.EXIT_OK, self.train(self.path("resumed"), "--checkpoint", checkpoint))
        other = write_config(self.path("other.yaml"), model={"msfb_local_kernel": 5})
        self.assertEqual(regctl.EXIT_FAILURE,
                         regctl.main(["train", "--config", other, "--manifest", self.manifest,
                                      "--out", self.path("mismatch"), "--checkpoint", checkpoint]))


class TestRegister(CliTestCase):
    def test_zero_heads(self):
        """
        Test that a zero head checkpoint writes the moving image back unchanged.
        """
        out = self.path("register")
        moving = os.path.join(self.bench, "case_000_moving.nii")
        fixed = os.path.join(self.bench, "case_000_fixed.nii")
        self.assertEqual(regctl.EXIT_OK, regctl.main(["register", "--config", self.config,
                                                      "--checkpoint", self.tiny_checkpoint("zero.pt"),
                                                      "--moving", moving, "--fixed", fixed, "--out", out]))
        warped = data.load_volume(os.path.join(out, "warped.nii.gz"), normalization="none")
        self.assertTrue(torch.equal(data.load_volume(moving).values, warped.values))
        field = data.load_field(os.path.join(out, "field.nii.gz"))
        self.assertEqual((3, *SHAPE), tuple(field.vectors.shape))
        self.assertTrue(field.is_identity)

    def test_inputs_are_cropped_to_target_shape(self):
        """
        Test that padded inputs are brought back to the configured shape before inference.
        """
        moving = os.path.join(self.bench, "case_000_moving.nii")
        padded = {}
        for name in ("moving", "fixed"):
            volume = data.load_volume(os.path.join(self.bench, f"case_000_{name}.nii"))
            values = np.pad(volume.values.numpy(), ((2, 2), (0, 0), (1, 1)))
            padded[name] = self.path(f"padded_{name}.nii")
            data.save_volume(Volume(torch.from_numpy(values)), padded[name])

        out = self.path("register_padded")
        self.assertEqual(regctl.EXIT_OK, regctl.main(["register", "--config", self.config,
                                                      "--checkpoint", self.tiny_checkpoint("zero.pt"),
                                                      "--moving", padded["moving"], "--fixed", padded["fixed"],
                                                      "--out", out]))
        warped = data.load_volume(os.path.join(out, "warped.nii.gz"), normalization="none")
        self.assertEqual(tuple(SHAPE), warped.shape)
        self.assertTrue(torch.equal(data.load_volume(moving).values, warped.values))
        self.assertEqual((3, *SHAPE), tuple(data.load_field(os.path.join(out, "field.nii.gz")).vectors.shape))

    def test_missing_option(self):
        self.assertEqual(regctl.EXIT_FAILURE, regctl.main(["register", "--moving", "m.nii", "--fixed", "f.nii"]))


class TestEvaluate(CliTestCase):
    def identical_pair_manifest(self):
        directory = self.path("identical")
        os.makedirs(directory, exist_ok=True)
        entries = []
        for copy in ("a", "b"):
            for suffix in ("moving.nii", "moving_labels.nii", "moving_landmarks.csv"):
                shutil.copy(os.path.join(self.bench, f"case_000_{suffix}"), os.path.join(directory, f"{copy}_{suffix}"))
            entries.append({"id": copy, "volume": f"{copy}_moving.nii", "labels": f"{copy}_moving_labels.nii",
                            "landmarks": f"{copy}_moving_landmarks.csv"})
        with open(os.path.join(directory, "manifest.json"), "w") as fp:
            json.dump({"entries": entries, "pairs": [{"id": "same", "moving": "a", "fixed": "b"}]}, fp)
        return os.path.join(directory, "manifest.json")

    def test_identity_fields(self):
        """
        Test identity fields on identical annotations.
        """
        fields = self.path("zero_fields")
        os.makedirs(fields, exist_ok=True)
        data.save_field(DisplacementField.identity(SHAPE),os.path.join(fields, "same.nii.gz"))
        out = self.path("eval_identity")
        self.assertEqual(regctl.EXIT_OK, regctl.main(["evaluate", "--manifest", self.identical_pair_manifest(),
                                                      "--fields", fields, "--out", out]))
        with open(os.path.join(out, "metrics.json"), "r", encoding="utf-8") as fp:
            report = json.load(fp)
        pair = report["pairs"][0]
        self.assertEqual(1.0, pair["dice_mean"])
        self.assertEqual(0.0, pair["hd95_mm"])
        self.assertEqual(0.0, pair["ndv_percent"])
        self.assertEqual(0.0, pair["tre_mm"])
        self.assertIsNone(pair["epe_voxels"])
        self.assertEqual(1, report["aggregate"]["pairs"])
        self.assertEqual("1.0000 ± 0.0000", report["aggregate"]["metrics"]["dice_mean"]["summary"])

    def test_stored_fields_match_inference(self):
        """
        Test that fields written by register evaluate like live inference.
        """
        checkpoint = self.tiny_checkpoint("random.pt", head_init=False)
        fields = self.path("registered")
        for pair in data.load_index(self.manifest).pairs:
            self.assertEqual(regctl.EXIT_OK, regctl.main([
                "register", "--config", self.config, "--checkpoint", checkpoint,
                "--out", os.path.join(fields, pair.pair_id),
                "--moving", os.path.join(self.bench, f"{pair.pair_id}_moving.nii"),
                "--fixed", os.path.join(self.bench, f"{pair.pair_id}_fixed.nii")]))

        reports = {}
        for source, option in (("stored", ["--fields", fields]), ("live", ["--checkpoint", checkpoint])):
            out = self.path(f"eval_{source}")
            self.assertEqual(regctl.EXIT_OK, regctl.main(["evaluate", "--config", self.config, "--manifest",
                                                          self.manifest, "--workers", "2", "--out", out, *option]))
            with open(os.path.join(out, "metrics.json"), "r", encoding="utf-8") as fp:
                reports[source] = json.load(fp)
        self.assertEqual(reports["stored"], reports["live"])
        self.assertEqual(["case_000", "case_001", "case_002"], [p["pair_id"] for p in reports["live"]["pairs"]])
        for values in reports["live"]["aggregate"]["metrics"].values():
            self.assertRegex(values["summary"], re.compile(r"^\d+\.\d{4} ± \d+\.\d{4}$"))

    def test_live_inference_needs_conforming_volumes(self):
        """
        Test that live inference refuses volumes whose grid differs from the configured shape.
        """
        directory = self.path("nonconforming")
        os.makedirs(directory, exist_ok=True)
        entries = []
        for name in ("moving", "fixed"):
            volume = data.load_volume(os.path.join(self.bench, f"case_000_{name}.nii"))
            data.save_volume(Volume(torch.from_numpy(np.pad(volume.values.numpy(), ((2, 2), (0, 0), (0, 0))))),
                             os.path.join(directory, f"{name}.nii"))
            entries.append({"id": name, "volume": f"{name}.nii"})
        manifest = os.path.join(directory, "manifest.json")
        with open(manifest, "w") as fp:
            json.dump({"entries": entries, "pairs": [{"id": "padded", "moving": "moving", "fixed": "fixed"}]}, fp)
        self.assertEqual(regctl.EXIT_FAILURE, regctl.main([
            "evaluate", "--config", self.config, "--manifest", manifest,
            "--checkpoint", self.tiny_checkpoint("zero.pt"), "--out", self.path("eval_nonconforming")]))

    def test_field_source_required(self):
        self.assertEqual(regctl.EXIT_FAILURE, regctl.main(["evaluate", "--manifest", self.manifest]))
        self.assertEqual(regctl.EXIT_FAILURE, regctl.main(["evaluate", "--manifest", self.manifest,
                                                           "--fields", self.bench, "--checkpoint", "x.pt"]))


class TestExitCodes(CliTestCase):
    def test_usage(self):
        with self.assertRaises(SystemExit) as context:
            regctl.main(["calibrate"])
        self.assertEqual(regctl.EXIT_USAGE, context.exception.code)
        with self.assertRaises(SystemExit) as context:
            regctl.main(["synth", "--count", "many"])
        self.assertEqual(regctl.EXIT_USAGE, context.exception.code)

    def test_missing_manifest(self):
        self.assertEqual(regctl.EXIT_FAILURE, regctl.main(["train", "--out", self.path("nothing")]))
        self.assertEqual(regctl.EXIT_FAILURE, regctl.main(["train", "--manifest", self.path("absent.json"),
                                                           "--out", self.path("nothing")]))

    def test_unknown_config_key(self):
        bad = self.path("bad.yaml")
        with open(bad, "w") as fp:
            yaml.safe_dump({"loss": {"gamma": 1.0}}, fp)
        self.assertEqual(regctl.EXIT_FAILURE, regctl.main(["synth", "--config", bad, "--out", self.path("bad")]))


@pytest.mark.slow
class TestSyntheticRecovery(unittest.TestCase):
    def test_recovery(self):
        """
        Test that training on synthetic pairs recovers held out fields.
        """
        with tempfile.TemporaryDirectory() as tmp:
            bench = os.path.join(tmp, "bench")
            self.assertEqual(regctl.EXIT_OK, regctl.main(["synth", "--out", bench, "--count", "20",
                                                          "--validation", "4", "--shape", *map(str, SHAPE)]))
            config = write_config(os.path.join(tmp, "run.yaml"), model={"encoder_channels": [8, 16, 32, 64, 128],
                                                                        "aux_decoder_channels": [64, 32, 16, 16, 16],
                                                                        "msfb_local_kernel": 7},
                                  optimizer={"iterations": 2000, "checkpoint_every": 1000})
            run = os.path.join(tmp, "run")
            self.assertEqual(regctl.EXIT_OK, regctl.main(["train", "--config", config, "--out", run,
                                                          "--manifest", os.path.join(bench, "manifest.json")]))
            out = os.path.join(tmp, "eval")
            self.assertEqual(regctl.EXIT_OK, regctl.main(["evaluate", "--config", config, "--manifest",
                                                          os.path.join(bench, "validation.json"),
                                                          "--checkpoint", os.path.join(run, "checkpoint.pt"),
                                                          "--epe-margin", "4", "--out", out]))
            with open(os.path.join(out, "metrics.json"), "r", encoding="utf-8") as fp:
                summary = json.load(fp)["aggregate"]["metrics"]
            self.assertLess(summary["epe_voxels"]["mean"], 1.0)
            self.assertLessEqual(summary["tre_mm"]["mean"], 0.4 * summary["tre_identity_mm"]["mean"])
            self.assertLess(summary["ndv_percent"]["mean"], 0.5)


if __name__ == '__main__':
    unittest.main()
