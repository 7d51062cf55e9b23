import json
import pytest
from pathlib import Path
from typing import Callable, List
from duet import cli
from duet.cli import main
from duet.gradcheck import CheckResult

f1_t = Callable[[List[str]], int]


@pytest.fixture  # type: ignore
def run(capsys: pytest.CaptureFixture) -> f1_t:
    def _run(argv: List[str]) -> int:
        code = main(argv)
        capsys.readouterr()
        return code

    return _run


def test_gradcheck_subset(capsys: pytest.CaptureFixture) -> None:
    assert main(['gradcheck', '--case', 'add_sub', '--case', 'softmax_rows']) == 0
    out = capsys.readouterr().out
    assert 'max relative error' in out
    assert 'add_sub' in out and 'conv2d' not in out


def test_gradcheck_exit_follows_worst_error(monkeypatch: pytest.MonkeyPatch,
                                           capsys: pytest.CaptureFixture) -> None:
    strict = [CheckResult('add_sub', 5e-6, 1e-6), CheckResult('conv2d', 2e-5, 1e-4)]
    monkeypatch.setattr(cli, 'gradient_suite', lambda **_: strict)
    assert main(['gradcheck']) == 0
    assert 'FAIL' in capsys.readouterr().out
    loose = [CheckResult('conv2d', 3e-4, 1e-3)]
    monkeypatch.setattr(cli, 'gradient_suite', lambda **_: loose)
    assert main(['gradcheck']) == 1


def test_argument_errors(capsys: pytest.CaptureFixture, tmp_path: Path) -> None:
    assert main(['gradcheck', '--case', 'no_such_case']) == 2
    assert main(['train', '--data', str(tmp_path / 'missing'), '--out', str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert 'does not exist' in err and 'usage' in err
    assert main(['train', '--bogus']) == 2
    assert main(['train', '--data', str(tmp_path), '--out', str(tmp_path),
                 '--insert', 'two']) == 2
    assert main([]) == 2


def test_failures_exit_one(run: f1_t, tmp_path: Path) -> None:
    (tmp_path / 'manifest.csv').write_text('path,identity\n')
    assert run(['train', '--data', str(tmp_path), '--out', str(tmp_path / 'run')]) == 1
    (tmp_path / 'bad.emb').write_bytes(b'{"format": "other"}\n')
    assert run(['eval', '--query', str(tmp_path / 'bad.emb'),
                '--gallery', str(tmp_path / 'bad.emb')]) == 1


def test_end_to_end(run: f1_t, capsys: pytest.CaptureFixture, tmp_path: Path) -> None:
    data, out = str(tmp_path / 'data'), str(tmp_path / 'run')
    assert run(['synth', '--out', data, '--identities', '6', '--images-per-identity', '4',
                '--cameras', '2']) == 0
    assert run(['train', '--data', data, '--out', out, '--insert', '2:1', '--epochs', '1',
                '--P', '2', '--K', '2', '--steps-per-epoch', '2']) == 0
    checkpoint = str(Path(out) / 'model.ckpt')

    report = tmp_path / 'report.json'
    assert main(['eval', '--data', data, '--checkpoint', checkpoint,
                 '--report', str(report)]) == 0
    assert 'mAP' in capsys.readouterr().out
    metrics = json.loads(report.read_text())
    assert 0.0 <= metrics['map'] <= 1.0 and metrics['valid_queries'] == 6

    query, gallery = str(tmp_path / 'q.emb'), str(tmp_path / 'g.emb')
    assert run(['extract', '--data', data, '--checkpoint', checkpoint,
                '--split', 'query', '--out', query]) == 0
    assert run(['extract', '--data', data, '--checkpoint', checkpoint,
                '--split', 'gallery', '--out', gallery]) == 0
    offline = tmp_path / 'offline.json'
    assert run(['eval', '--query', query, '--gallery', gallery,
                '--report', str(offline)]) == 0
    assert json.loads(offline.read_text())['map'] == pytest.approx(metrics['map'], abs=1e-5)

    masks = tmp_path / 'masks'
    assert run(['export-masks', '--data', data, '--checkpoint', checkpoint,
                '--index', '0', '--rows', '0', '3', '--out', str(masks)]) == 0
    assert sorted(p.name for p in masks.iterdir()) == [
        'attn_0.pgm', 'attn_3.pgm'] + [f'part_{k}.pgm' for k in range(5)]
    assert run(['export-masks', '--data', data, '--checkpoint', checkpoint,
                '--index', '999', '--out', str(masks)]) == 2
    assert run(['eval', '--data', data]) == 2
