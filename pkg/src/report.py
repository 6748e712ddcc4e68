"""Merge the CSV outputs of several run directories into comparison tables, and check them against
the pinned acceptance thresholds."""
import json
import logging
import math
import os
import re
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from src.utils import pull_metric, read_csv, write_csv

logger = logging.getLogger(__name__)

RUN_MANIFEST = 'run_manifest.json'
METRICS_FILE = 'metrics.csv'
EVAL_FILE = 'eval.csv'
PROBE_FILE = 'probe.csv'
MATCHING_FILE = 'matching.csv'
AGREEMENT_FILE = 'agreement.csv'
ACCEPTANCE_FILE = 'acceptance.csv'
VARIANCE_STEPS = 500


def loss_variance(losses, last=VARIANCE_STEPS):
    """Sample variance of the per-step losses over the last `last` steps."""
    tail = np.asarray(losses, dtype=np.float64)[-last:]
    return float(np.var(tail, ddof=1)) if tail.size > 1 else float('nan')


def _read_if_exists(path):
    return read_csv(path) if os.path.exists(path) else []


def summarize_run(run_dir):
    """One flat row for a run directory: identity from its manifest, last loss, loss variance, eval values."""
    row = {'run': os.path.basename(os.path.normpath(run_dir))}
    manifest_path = os.path.join(run_dir, RUN_MANIFEST)
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding='utf-8') as f:
            manifest = json.load(f)
        row.update(objective=manifest.get('objective', ''), seed=manifest.get('seed', ''),
                   window=manifest.get('window', ''), config_hash=manifest.get('config_hash', ''))
    history = [{k: float(v) for k, v in r.items()} for r in _read_if_exists(os.path.join(run_dir, METRICS_FILE))]
    losses = pull_metric(history, 'loss')
    if losses:
        row.update(steps=len(losses), final_loss=losses[-1], loss_variance=loss_variance(losses))
    for r in _read_if_exists(os.path.join(run_dir, EVAL_FILE)):
        row[f"{r['task']}:{r['key']}"] = float(r['value'])
    for r in _read_if_exists(os.path.join(run_dir, PROBE_FILE)):
        row['probe:accuracy'] = float(r['accuracy'])
    for r in _read_if_exists(os.path.join(run_dir, MATCHING_FILE)):
        row[f"matching:{r['method']}:{r['kind']}"] = float(r['accuracy'])
    for r in _read_if_exists(os.path.join(run_dir, AGREEMENT_FILE)):
        row[f"agreement:{r['method']}:{r['other']}"] = float(r['agreement'])
    return row


def group_by(rows, key, metrics):
    """Mean, sample standard deviation and count of each metric per value of `key`."""
    groups = defaultdict(list)
    for row in rows:
        groups[str(row.get(key, ''))].append(row)
    out = []
    for value in sorted(groups):
        entry = {key: value, 'runs': len(groups[value])}
        for metric in metrics:
            xs = [r[metric] for r in groups[value] if metric in r]
            entry[f'{metric}:mean'] = float(np.mean(xs)) if xs else float('nan')
            entry[f'{metric}:std'] = float(np.std(xs, ddof=1)) if len(xs) > 1 else float('nan')
        out.append(entry)
    return out


def ordering_wins(rows, metric, better, worse, key='objective'):
    """Seeds where `better` scores at least `worse` on `metric`, out of the seeds both ran."""
    by_seed = defaultdict(dict)
    for row in rows:
        if metric in row:
            by_seed[row.get('seed')][row.get(key)] = row[metric]
    shared = [s for s, v in by_seed.items() if better in v and worse in v]
    return sum(by_seed[s][better] >= by_seed[s][worse] for s in shared), len(shared)


def _columns(rows):
    columns = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    return columns


def write_table(path, rows):
    columns = _columns(rows)
    write_csv(path, columns, [[row.get(c, '') for c in columns] for row in rows])


MASKED_KEY = re.compile(r'^masked_accuracy:t=(?P<t>[0-9.eE+-]+):visual$')
DEFAULT_OBJECTIVE = 'mdc'
BASELINES = ('bert:0.15', 'parallel')


class AcceptanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Thresholds:
    probe_accuracy: float = 0.80
    masked_accuracy: float = 0.80
    masked_t_min: float = 0.5
    swap_matching: float = 0.80
    decision_agreement: float = 0.80
    ordering_fraction: float = 0.66

    @classmethod
    def from_args(cls, cfg):
        return cls(**{k: float(v) for k, v in cfg.items() if k != 'check'})


def masked_accuracy_high_t(row, t_min):
    """Mean masked-token accuracy with visual features over the grid points t >= t_min."""
    values = [v for k, v in row.items() if (m := MASKED_KEY.match(k)) and float(m.group('t')) >= t_min]
    return float(np.mean(values)) if values else None


def check_row(row, thresholds):
    """(criterion, value, threshold, passed) for every criterion whose metric the row carries."""
    candidates = [
        ('probe_accuracy', row.get('probe:accuracy'), thresholds.probe_accuracy),
        ('masked_accuracy', masked_accuracy_high_t(row, thresholds.masked_t_min), thresholds.masked_accuracy),
        ('swap_matching', row.get('matching:heuristic:swap'), thresholds.swap_matching),
        ('decision_agreement', row.get('agreement:elbo_mc:heuristic', row.get('agreement:heuristic:elbo_mc')),
         thresholds.decision_agreement),
    ]
    return [(name, value, limit, bool(value >= limit)) for name, value, limit in candidates
            if value is not None and not math.isnan(value)]


def acceptance(rows, thresholds):
    """Acceptance rows over run summaries: per-run thresholds on default-objective runs, then seed orderings."""
    out = []
    for row in rows:
        if row.get('objective') != DEFAULT_OBJECTIVE:
            continue
        out += [(row['run'], *check) for check in check_row(row, thresholds)]
    for other in BASELINES:
        wins, total = ordering_wins(rows, 'probe:accuracy', DEFAULT_OBJECTIVE, other)
        if total:
            fraction = wins / total
            logger.info('probe accuracy %s >= %s in %d/%d seeds', DEFAULT_OBJECTIVE, other, wins, total)
            out.append(('*', f'probe_ordering:{other}', fraction, thresholds.ordering_fraction,
                        fraction >= thresholds.ordering_fraction))
    return out


def write_acceptance(path, checks):
    write_csv(path, ('run', 'criterion', 'value', 'threshold', 'passed'), checks)
    failed = [c for c in checks if not c[-1]]
    for run, criterion, value, threshold, _ in failed:
        logger.warning('%s: %s %.4f below %.4f', run, criterion, value, threshold)
    return failed


def raise_on_failures(failed):
    if failed:
        names = ', '.join(f'{run}:{criterion}' for run, criterion, *_ in failed)
        raise AcceptanceError(f'{len(failed)} acceptance check(s) failed: {names}')


def report(run_dirs, out_dir, thresholds=None):
    """Write runs.csv (one row per run), by_objective.csv, by_window.csv and acceptance.csv under `out_dir`.

    Returns the written paths and the failed acceptance checks.
    """
    if not run_dirs:
        raise ValueError('report needs at least one run directory')
    rows = [summarize_run(d) for d in run_dirs]
    metrics = [c for c in _columns(rows) if c not in ('run', 'objective', 'seed', 'window', 'config_hash')]
    os.makedirs(out_dir, exist_ok=True)
    names = ('runs.csv', 'by_objective.csv', 'by_window.csv', ACCEPTANCE_FILE)
    paths = {name: os.path.join(out_dir, name) for name in names}
    write_table(paths['runs.csv'], rows)
    write_table(paths['by_objective.csv'], group_by(rows, 'objective', metrics))
    write_table(paths['by_window.csv'], group_by(rows, 'window', metrics))
    failed = write_acceptance(paths[ACCEPTANCE_FILE], acceptance(rows, thresholds or Thresholds()))
    return paths, failed
