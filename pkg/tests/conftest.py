import numpy as np
import pytest

from rfpresence import synth
from rfpresence.preprocess import PipelineVariant


def rand_window(rng, n_frames=128, n_f=14, n_r=3, n_t=3, low=0.5, high=2.0):
    """Random complex window with magnitudes bounded away from zero."""
    mag = rng.uniform(low, high, (n_frames, n_f, n_r, n_t))
    phase = rng.uniform(-np.pi, np.pi, (n_frames, n_f, n_r, n_t))
    return mag * np.exp(1j * phase)


TINY_SIM = dict(scenes=3, windows_per_label=6, seed=42, windows_per_run=3)


@pytest.fixture(scope="session")
def tiny_config():
    return synth.SimConfig(noise_std=0.02)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_config):
    """Three small synthetic days, 6 windows per label each."""
    out = tmp_path_factory.mktemp("tinydata")
    synth.gen_dataset(out, config=tiny_config, **TINY_SIM)
    return out


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset_dir):
    """A quickly trained with-dft model over the tiny dataset."""
    from rfpresence import pipeline

    files = sorted(tiny_dataset_dir.glob("*.csi"))
    ds = pipeline.build_dataset(files, variant=PipelineVariant.WITH_DFT)
    days = ds.days
    ds.assign_splits(days[:-1], days[-1:])
    cfg = pipeline.TrainConfig(epochs=4, batch_size=8)
    model, report = pipeline.train(ds, config=cfg, seed=7)
    return model
