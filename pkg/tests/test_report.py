import json

import pytest

from src.report import (ACCEPTANCE_FILE, AcceptanceError, Thresholds, acceptance, check_row, masked_accuracy_high_t,
                        raise_on_failures, report)
from src.utils import read_csv, write_csv


def make_run(root, name, objective, seed, probe=None, **files):
    run = root / name
    run.mkdir()
    (run / 'run_manifest.json').write_text(json.dumps({'objective': objective, 'seed': seed, 'window': '[0.5,1]'}))
    if probe is not None:
        write_csv(run / 'probe.csv', ('accuracy', 'train_accuracy', 'num_train', 'num_test'), [[probe, 1.0, 8, 2]])
    for filename, (header, rows) in files.items():
        write_csv(run / f'{filename}.csv', header, rows)
    return str(run)


def test_masked_accuracy_uses_high_t_visual_rows():
    row = {'masked_accuracy:t=0.15:visual': 0.1, 'masked_accuracy:t=0.5:visual': 0.9,
           'masked_accuracy:t=1.0:visual': 0.8, 'masked_accuracy:t=1.0:ablated': 0.0}
    assert masked_accuracy_high_t(row, 0.5) == pytest.approx(0.85)
    assert masked_accuracy_high_t({}, 0.5) is None


def test_check_row_only_covers_present_metrics():
    row = {'probe:accuracy': 0.9, 'masked_accuracy:t=0.5:visual': 0.9, 'matching:heuristic:swap': 0.7}
    checks = {name: passed for name, _, _, passed in check_row(row, Thresholds())}
    assert checks == {'probe_accuracy': True, 'masked_accuracy': True, 'swap_matching': False}
    agreement = check_row({'agreement:heuristic:elbo_mc': 0.85}, Thresholds())
    assert [(name, passed) for name, _, _, passed in agreement] == [('decision_agreement', True)]


def test_acceptance_orders_seeds_and_skips_baseline_thresholds():
    rows = [
        {'run': 'm0', 'objective': 'mdc', 'seed': 0, 'probe:accuracy': 0.9},
        {'run': 'm1', 'objective': 'mdc', 'seed': 1, 'probe:accuracy': 0.85},
        {'run': 'm2', 'objective': 'mdc', 'seed': 2, 'probe:accuracy': 0.7},
        {'run': 'p0', 'objective': 'parallel', 'seed': 0, 'probe:accuracy': 0.5},
        {'run': 'p1', 'objective': 'parallel', 'seed': 1, 'probe:accuracy': 0.5},
        {'run': 'p2', 'objective': 'parallel', 'seed': 2, 'probe:accuracy': 0.8},
    ]
    checks = acceptance(rows, Thresholds())
    assert {run for run, *_ in checks} == {'m0', 'm1', 'm2', '*'}
    (ordering,) = [c for c in checks if c[1] == 'probe_ordering:parallel']
    assert ordering[2] == pytest.approx(2 / 3) and ordering[-1]
    failed = [c for c in checks if not c[-1]]
    assert [(run, criterion) for run, criterion, *_ in failed] == [('m2', 'probe_accuracy')]


def test_report_writes_acceptance_and_fails_on_request(tmp_path):
    good = make_run(tmp_path, 'good', 'mdc', 0, probe=0.95,
                    agreement=(('method', 'other', 'agreement'), [['elbo_mc', 'heuristic', 0.9]]))
    bad = make_run(tmp_path, 'bad', 'mdc', 1, probe=0.4)
    paths, failed = report([good, bad], str(tmp_path / 'out'))
    rows = read_csv(paths[ACCEPTANCE_FILE])
    assert {(r['run'], r['criterion'], r['passed']) for r in rows} == {
        ('good', 'probe_accuracy', 'True'), ('good', 'decision_agreement', 'True'), ('bad', 'probe_accuracy', 'False')}
    with pytest.raises(AcceptanceError, match='bad:probe_accuracy'):
        raise_on_failures(failed)
    raise_on_failures([])
