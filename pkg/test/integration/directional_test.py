import pytest
from typing import Callable
from duet.ablate import run_variant, variants
from duet.config import BackboneConfig, RunConfig
from duet.data import Dataset

f_dataset_t = Callable[..., Dataset]


@pytest.mark.slow  # type: ignore
def test_blocks_improve_retrieval_in_order(synthetic: f_dataset_t) -> None:
    dataset = synthetic(identities=32, images_per_identity=8, cameras=3)
    backbone = BackboneConfig()
    run = RunConfig(P=8, K=4, epochs=12, scale_schedule=True, validate_every=0)
    rows = {v.name: v for v in variants('table1', 2)}
    scores = {name: run_variant(rows[name], backbone, run, dataset, seeds=(0, 1, 2)).r1
              for name in ('Baseline', 'DPB (HP-5)', 'DPB (HP-5 + Latent)')}
    assert scores['Baseline'] < scores['DPB (HP-5)'] < scores['DPB (HP-5 + Latent)']
