import io
import json
import logging
import numpy as np
from pathlib import Path
from duet.logs import configure_logging
from duet.modes import Split


def test_json_lines(tmp_path: Path) -> None:
    stream = io.StringIO()
    configure_logging(logging.INFO, stream, tmp_path / 'run.log')
    logger = logging.getLogger('duet.train')
    logger.debug('hidden')
    logger.info('epoch', extra={'fields': {'epoch': np.int64(3), 'loss': np.float32(0.5),
                                           'split': Split.QUERY, 'cmc': np.ones(2)}})
    lines = stream.getvalue().splitlines()
    assert len(lines) == 1
    record = json.loads(lines[0])
    assert record == {'level': 'info', 'logger': 'duet.train', 'event': 'epoch',
                      'fields': {'cmc': [1.0, 1.0], 'epoch': 3, 'loss': 0.5,
                                 'split': 'query'}}
    assert (tmp_path / 'run.log').read_text().splitlines() == lines


def test_reconfigure_replaces_handlers() -> None:
    first, second = io.StringIO(), io.StringIO()
    configure_logging('DEBUG', first)
    configure_logging('DEBUG', second)
    logging.getLogger('duet.data').debug('loaded')
    assert first.getvalue() == ''
    assert json.loads(second.getvalue()) == {'level': 'debug', 'logger': 'duet.data',
                                             'event': 'loaded'}
