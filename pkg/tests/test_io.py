import struct

import numpy as np
import pytest

from mtcdetect.errors import FormatError
from mtcdetect.evaluation import RocCurve
from mtcdetect.io import (DATASET_MAGIC, EvalConfig, ExperimentConfig, read_checkpoint, read_curve,
                          read_dataset, read_trace, write_checkpoint, write_curve, write_dataset, write_trace)
from mtcdetect.signal import SimulationSetup, generate_batch
from mtcdetect.training import EpochRecord, TrainConfig
from mtcdetect.transformer import HTParams, forward

from _util import calibrated_params, tiny_config

SETUP = SimulationSetup(n_devices=6, pilot_len=3, m_antennas=5)


# ---------------------------------------------------------------- datasets


def test_dataset_round_trip_is_bit_exact(tmp_path):
    batch, ys = generate_batch(SETUP, 4, seed=9, keep_y=True)
    path = tmp_path / "d.bin"
    write_dataset(path, batch, ys)
    back, ys_back = read_dataset(path)
    for name in ("B", "C", "labels", "noise_var"):
        assert np.array_equal(getattr(back, name), getattr(batch, name)), name
    assert back.m_antennas == 5 and back.labels.dtype == np.uint8
    assert all(np.array_equal(a, b) for a, b in zip(ys, ys_back))


def test_dataset_size_matches_layout(tmp_path):
    batch, _ = generate_batch(SETUP, 3, seed=1)
    path = tmp_path / "d.bin"
    write_dataset(path, batch)
    n, lp = 6, 3
    per_sample = n + 8 + 16 * (lp * n + lp * lp)
    assert path.stat().st_size == len(DATASET_MAGIC) + 24 + 3 * per_sample


def test_empty_dataset_is_header_only(tmp_path):
    batch, _ = generate_batch(SETUP, 0, seed=1)
    path = tmp_path / "empty.bin"
    write_dataset(path, batch)
    assert path.stat().st_size == len(DATASET_MAGIC) + 24
    back, ys = read_dataset(path)
    assert len(back) == 0 and ys == []
    assert back.B.shape[1:] == (3, 6)


def test_truncated_dataset_is_rejected(tmp_path):
    batch, _ = generate_batch(SETUP, 2, seed=1)
    path = tmp_path / "d.bin"
    write_dataset(path, batch)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(FormatError):
        read_dataset(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(FormatError):
        read_dataset(path)


def test_bad_magic_and_version(tmp_path):
    batch, _ = generate_batch(SETUP, 1, seed=1)
    path = tmp_path / "d.bin"
    write_dataset(path, batch)
    data = bytearray(path.read_bytes())
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(FormatError):
        read_dataset(bad)
    data[len(DATASET_MAGIC):len(DATASET_MAGIC) + 4] = struct.pack("<I", 99)
    bad.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        read_dataset(bad)


def test_missing_file_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        read_dataset(tmp_path / "nope.bin")


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_gives_identical_outputs(tmp_path):
    cfg = tiny_config()
    params = calibrated_params(cfg, pilot_len=3)
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, params)
    back = read_checkpoint(path)
    assert back.config == cfg and back.pilot_len == 3 and back.bn_updates == params.bn_updates
    batch, _ = generate_batch(SETUP, 3, seed=4)
    a = forward(batch.B, batch.C, params).data
    b = forward(batch.B, batch.C, back).data
    assert np.array_equal(a, b)


def test_checkpoint_truncation_and_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, HTParams.initialize(tiny_config(), 2, seed=0))
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError):
        read_checkpoint(path)
    path.write_bytes(b"MTCDS1" + data[6:])
    with pytest.raises(FormatError):
        read_checkpoint(path)


# ---------------------------------------------------------------- traces, curves


def test_trace_round_trip(tmp_path):
    trace = [EpochRecord(1, 0.123456789012345, 1e-3), EpochRecord(2, 0.1 / 3, 1e-4)]
    path = tmp_path / "t.tsv"
    write_trace(path, trace)
    assert read_trace(path) == trace
    path.write_text("1\t0.5\n")
    with pytest.raises(FormatError):
        read_trace(path)


def test_curve_round_trip(tmp_path):
    curve = RocCurve(xi=np.array([0.0, 0.5, 1.0]), pm=np.array([0.0, 0.25, 1.0]), pf=np.array([1.0, 0.1, 0.0]))
    path = tmp_path / "c.tsv"
    write_curve(path, curve)
    assert path.read_text().splitlines()[0] == "xi\tpm\tpf"
    back = read_curve(path)
    for name in ("xi", "pm", "pf"):
        assert np.array_equal(getattr(back, name), getattr(curve, name))
    path.write_text("a\tb\tc\n")
    with pytest.raises(FormatError):
        read_curve(path)


# ---------------------------------------------------------------- config


def test_experiment_config_round_trip(tmp_path):
    cfg = ExperimentConfig(
        scenario=SimulationSetup(n_devices=35, pilot_len=7, m_antennas=64, activity_ratio=0.2),
        model=tiny_config(c_clip=5.0),
        train=TrainConfig(epochs=3, decay_epochs=[], lr=3e-3, scenario_mode="sample"),
        eval=EvalConfig(thresholds=[0.1, 0.5], cd_passes=4),
        data_seed=11,
    )
    path = tmp_path / "exp.ini"
    cfg.save(path)
    assert ExperimentConfig.load(path) == cfg


def test_config_partial_file_keeps_defaults():
    cfg = ExperimentConfig.from_ini("[scenario]\nn_devices = 40\n[eval]\nthresholds = none\n")
    assert cfg.scenario.n_devices == 40 and cfg.scenario.pilot_len == SimulationSetup().pilot_len
    assert cfg.eval.thresholds is None and cfg.train == TrainConfig()


@pytest.mark.parametrize("text", ["[scenario]\nbogus = 1\n", "[nonsense]\na = 1\n",
                                  "[scenario]\nn_devices = many\n", "[seeds]\nother = 3\n", "not ini"])
def test_config_errors(text):
    with pytest.raises(FormatError):
        ExperimentConfig.from_ini(text)
