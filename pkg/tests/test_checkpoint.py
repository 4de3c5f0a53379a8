import os
import tempfile
import unittest

import torch

from msfreg import CheckpointError
from msfreg.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from msfreg.model.network import FusionPyramidNet, ModelConfig


def tiny_config(**kwargs):
    return ModelConfig(encoder_channels=[2, 2, 2, 2, 2], aux_decoder_channels=[2, 2, 2, 2, 2],
                       msfb_local_kernel=3, **kwargs)


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.file_name = os.path.join(self._tmp.name, "nested", "model.pt")
        torch.manual_seed(0)
        self.model = FusionPyramidNet(tiny_config(head_init=False))

    def tearDown(self):
        self._tmp.cleanup()

    def test_round_trip(self):
        """
        Test that weights, configuration and bookkeeping survive a save and load.
        """
        optimizer = torch.optim.Adam(self.model.parameters(), lr=1e-3)
        save_checkpoint(self.file_name, self.model, iteration=7, run_config={"seed": 1}, optimizer=optimizer)
        self.assertFalse(os.path.exists(self.file_name + ".partial"))
        loaded = load_checkpoint(self.file_name, expected_config=tiny_config(head_init=False))
        self.assertEqual(self.model.config, loaded.model.config)
        self.assertEqual(7, loaded.iteration)
        self.assertEqual({"seed": 1}, loaded.run_config)
        self.assertIsNotNone(loaded.optimizer_state)
        self.assertFalse(loaded.model.training)
        for name, tensor in self.model.state_dict().items():
            self.assertTrue(torch.equal(tensor, loaded.model.state_dict()[name]), name)

    def test_config_mismatch(self):
        save_checkpoint(self.file_name, self.model)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.file_name, expected_config=tiny_config())

    def test_missing_and_corrupt(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.file_name)
        os.makedirs(os.path.dirname(self.file_name))
        with open(self.file_name, "wb") as fp:
            fp.write(b"not a checkpoint")
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.file_name)

    def test_format_version(self):
        save_checkpoint(self.file_name, self.model)
        payload = torch.load(self.file_name, weights_only=True)
        payload["format_version"] = FORMAT_VERSION + 1
        torch.save(payload, self.file_name)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.file_name)


if __name__ == '__main__':
    unittest.main()
