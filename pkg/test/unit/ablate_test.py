import pytest
from duet.ablate import AblationRow, BLOCK_LAYOUTS, format_table, plan, variants
from duet.config import BackboneConfig, ConfigError
from duet.modes import LatentMask


def test_table1_rows() -> None:
    rows = variants('table1', 3)
    assert [v.name for v in rows] == ['Baseline', 'DPB (HP-1)', 'DPB (HP-2)', 'DPB (HP-5)',
                                      'DPB (Latent)', 'DPB (HP-5 + Latent)']
    assert rows[0].stage is None and rows[1].stage == 3
    assert rows[2].overrides['insertions'] == ((3, 1),)
    for variant in rows:
        BackboneConfig(**variant.overrides)


def test_masking_rows() -> None:
    rows = variants('masking', 2)
    assert len(rows) == 5
    masks = [v.overrides.get('latent_mask', LatentMask.NONE) for v in rows]
    assert masks.count(LatentMask.KEEP_NONHUMAN_ONLY) == 2
    assert masks.count(LatentMask.KEEP_HUMAN_ONLY) == 2


def test_block_count_rows() -> None:
    rows = variants('blocks', 2)
    assert len(rows) == 9
    for variant in rows:
        assert BackboneConfig(**variant.overrides).total_blocks() in BLOCK_LAYOUTS


def test_plan() -> None:
    every = plan('table1', [1, 2, 3, 4])
    assert len(every) == 21
    assert [v.name for v in every].count('Baseline') == 1
    assert len(plan('blocks', [1, 2])) == 9
    with pytest.raises(ConfigError, match='Stage 5'):
        plan('table1', [5])
    with pytest.raises(ConfigError, match='Unknown grid'):
        plan('table2', [2])


def test_format_table() -> None:
    table = format_table([AblationRow('Baseline', None, 0.5, 0.75, 0.8, 0.4),
                          AblationRow('DPB (HP-5)', 2, 0.625, 1.0, 1.0, 0.5)])
    header, first, second = table.splitlines()
    assert header.split() == ['Method', 'Stage', 'R-1', 'R-5', 'R-10', 'mAP']
    assert first.split() == ['Baseline', '-', '50.00', '75.00', '80.00', '40.00']
    assert second.endswith('Res-2   62.50  100.00  100.00   50.00')
