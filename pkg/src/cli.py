"""
Subcommands behind `main.py cmd=<name>`.

Each subcommand reads the composed Hydra config, refuses to overwrite a
non-empty output directory unless `force=true`, writes a run manifest
before any long computation, and raises on any failed invariant so the
entry point exits nonzero.
"""
import hashlib
import json
import logging
import os
import shutil
import subprocess
import time
from dataclasses import asdict, dataclass, field

import hydra
from omegaconf import OmegaConf

from src.data import synth
from src.data.datasets import CaptionSet
from src.evaluate import ProbeConfig, compositionality_eval, decision_agreement, evaluate, linear_probe
from src.inference import InvariantViolation
from src.metrics import binomial_stderr
from src.model_serializer import build_model, load_checkpoint
from src.models import modelFactory
from src.models.utils import print_network
from src.numerics import set_default_dtype
from src.numerics.checks import TOLERANCE, run_checks
from src.report import (ACCEPTANCE_FILE, DEFAULT_OBJECTIVE, Thresholds, check_row, raise_on_failures, report,
                        write_acceptance)
from src.sample import sample
from src.scoring import ELBO_EXACT, EXACT_MAX_TOKENS, score
from src.seeding import rng_stream
from src.solver import Solver, TrainConfig, config_dump
from src.utils import bold, write_csv

logger = logging.getLogger(__name__)

RUN_MANIFEST = 'run_manifest.json'
CHECKPOINT_FILE = 'checkpoint.mdc'
PATH_KEYS = ('data', 'out', 'ckpt', 'config_file')
# keys that name where things go or how loudly, not what is computed
UNHASHED_KEYS = ('cmd', 'out', 'force', 'resume', 'verbose', 'config_file', 'runs', 'num_prints')


class RefusalError(RuntimeError):
    pass


@dataclass
class RunManifest:
    cmd: str
    config_hash: str
    code_version: str
    seed: int
    started: str
    finished: str = ''
    artifacts: list = field(default_factory=list)
    objective: str = ''
    window: str = ''
    extra: dict = field(default_factory=dict)

    def write(self, out_dir):
        with open(os.path.join(out_dir, RUN_MANIFEST), 'w', encoding='utf-8') as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write('\n')

    def finish(self, out_dir):
        self.finished = _now()
        self.write(out_dir)


def _now():
    return time.strftime('%Y-%m-%dT%H:%M:%S%z')


def code_version():
    """git describe of the source tree, or 'unknown' outside a git checkout."""
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    try:
        out = subprocess.run(['git', 'describe', '--always', '--dirty', '--tags'], cwd=root,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return 'unknown'
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else 'unknown'


def config_hash(args):
    content = OmegaConf.to_container(args, resolve=True)
    content = {k: v for k, v in content.items() if k not in UNHASHED_KEYS and k != 'hydra'}
    return hashlib.sha256(json.dumps(content, sort_keys=True).encode('utf-8')).hexdigest()


def merge_config_file(args):
    """Merge flat `key=value` lines of `args.config_file` into the struct-mode config; unknown keys raise."""
    if not args.config_file:
        return args
    with open(args.config_file, encoding='utf-8') as f:
        lines = [line.strip() for line in f]
    dotlist = [line for line in lines if line and not line.startswith('#')]
    for line in dotlist:
        if '=' not in line:
            raise ValueError(f'{args.config_file}: expected key=value, got {line!r}')
    merged = OmegaConf.merge(args, OmegaConf.from_dotlist(dotlist))
    logger.info('merged %d settings from %s', len(dotlist), args.config_file)
    return merged


def absolute_paths(args):
    for key in PATH_KEYS:
        if args.get(key):
            args[key] = hydra.utils.to_absolute_path(args[key])
    if args.get('runs'):
        args.runs = [hydra.utils.to_absolute_path(r) for r in args.runs]
    return args


def output_dir(args):
    """`args.out`, or runs/<cmd>-<config hash> when unset."""
    if args.out:
        return args.out
    return hydra.utils.to_absolute_path(os.path.join('runs', f'{args.cmd}-{config_hash(args)[:12]}'))


def prepare_out_dir(out, force, resumable=False):
    """Create `out`; a non-empty directory is refused unless forced, or resumed from its checkpoint."""
    if os.path.isdir(out) and os.listdir(out):
        if force:
            logger.warning('removing existing output directory %s', out)
            shutil.rmtree(out)
        elif resumable and os.path.exists(os.path.join(out, CHECKPOINT_FILE)):
            logger.info('resuming in %s', out)
        else:
            raise RefusalError(f'output directory {out} is not empty; pass force=true to overwrite')
    os.makedirs(out, exist_ok=True)
    return out


def start_manifest(args, out, artifacts, run=None, **kwargs):
    """Write the manifest of a starting subcommand; `run` carries seed and objective of a loaded checkpoint."""
    if run is not None:
        kwargs.update(objective=run.objective, window=run.window)
    manifest = RunManifest(cmd=args.cmd, config_hash=config_hash(args), code_version=code_version(),
                           seed=int(args.seed if run is None else run.seed), started=_now(),
                           artifacts=[os.path.join(out, a) for a in artifacts + [RUN_MANIFEST]], **kwargs)
    manifest.write(out)
    return manifest


def load_corpus(data_dir):
    if not data_dir:
        raise ValueError('this subcommand needs data=<corpus directory>')
    vocab = synth.load_vocab(data_dir)
    expected = synth.load_manifest(data_dir)['vocab_hash']
    if vocab.hash() != expected:
        raise RefusalError(f'corpus vocabulary sidecar hash {vocab.hash()} does not match its manifest {expected}')
    return CaptionSet(data_dir), vocab


@dataclass
class LoadedRun:
    model: object
    corpus: CaptionSet
    vocab: object
    seed: int
    objective: str
    window: str


def load_run(args):
    """Checkpointed model with its training seed and objective, plus the corpus; refuses on vocabulary mismatch."""
    if not args.ckpt:
        raise ValueError('this subcommand needs ckpt=<checkpoint file>')
    corpus, vocab = load_corpus(args.data)
    checkpoint = load_checkpoint(args.ckpt)
    ckpt_hash = checkpoint.extra.get('vocab_hash')
    if ckpt_hash != vocab.hash():
        raise RefusalError(f'checkpoint vocabulary hash {ckpt_hash} does not match corpus vocabulary hash '
                           f'{vocab.hash()}')
    model = build_model(checkpoint).eval()
    trained = checkpoint.extra.get('config', {})
    window = f'[{trained["omega_lower"]:g},{trained["omega_upper"]:g}]' if trained else ''
    logger.info(bold(f'Loaded {checkpoint.extra.get("objective")} checkpoint at step {checkpoint.extra.get("step")}'))
    return LoadedRun(model=model, corpus=corpus, vocab=vocab, seed=int(trained.get('seed', args.seed)),
                     objective=checkpoint.extra.get('objective', ''),
                     window=window)


def held_out(corpus, seed, args):
    _, held = corpus.split(seed, args.probe.train_fraction)
    records = held.records()
    return records[:args.limit] if args.limit else records


def gen_data(args):
    out = prepare_out_dir(output_dir(args), args.force)
    manifest = start_manifest(args, out, [synth.CORPUS_FILE, synth.MANIFEST_FILE, synth.VOCAB_FILE])
    synth.write_corpus(out, int(args.count), int(args.seed))
    manifest.finish(out)


def train(args):
    corpus, vocab = load_corpus(args.data)
    config = TrainConfig.from_args(args)
    train_set, _ = corpus.split(config.seed, args.probe.train_fraction)
    model = modelFactory.get_model(args, vocab)['captioner']
    print_network('captioner', model, logger)
    out = prepare_out_dir(output_dir(args), args.force, resumable=args.resume)
    manifest = start_manifest(args, out, [CHECKPOINT_FILE, 'metrics.csv', 'timing.csv'],
                              objective=config.parsed.label,
                              window=f'[{config.schedule.omega_lower:g},{config.schedule.omega_upper:g}]')
    solver = Solver(train_set, model, vocab, config, out, config_dump=config_dump(args))
    solver.train()
    manifest.finish(out)


def sample_cmd(args):
    run = load_run(args)
    model, seed, corpus, vocab = run.model, run.seed, run.corpus, run.vocab
    out = prepare_out_dir(output_dir(args), args.force)
    records = held_out(corpus, seed, args)[:args.num]
    manifest = start_manifest(args, out, ['samples.csv'] + [f'{r.index:06d}.png' for r in records], run=run)
    sample(model, records, vocab, int(args.length), out)
    manifest.finish(out)


SCORE_COLUMNS = ('pair_id', 'method', 'value', 'samples', 'stderr', 'forward_passes', 'elapsed_ms')


def score_cmd(args):
    run = load_run(args)
    model, seed, corpus, vocab = run.model, run.seed, run.corpus, run.vocab
    records = held_out(corpus, seed, args)
    pairs = []
    for record in records:
        pairs.append((f'{record.index}:true', record, record.caption))
        pairs += [(f'{record.index}:{kind}', record, caption) for kind, caption in record.negatives.items()]
    if args.method == ELBO_EXACT:
        for pid, _, caption in pairs:
            N = len(vocab.strip(caption))
            if N > EXACT_MAX_TOKENS:
                raise RefusalError(f'elbo_exact is capped at N <= {EXACT_MAX_TOKENS} tokens; caption {pid} has N = {N}')
    out = prepare_out_dir(output_dir(args), args.force)
    manifest = start_manifest(args, out, ['scores.csv'], run=run)
    rows = []
    for j, (pid, record, caption) in enumerate(pairs):
        rng = rng_stream(seed, 'mc', record.index, j)
        rep = score(model, caption, record.image, vocab, args.method, samples=int(args.samples), rng=rng)
        rows.append([pid, rep.method, rep.value, rep.samples, '' if rep.stderr is None else rep.stderr,
                     rep.forward_passes, rep.elapsed_ms])
    write_csv(os.path.join(out, 'scores.csv'), SCORE_COLUMNS, rows)
    manifest.finish(out)


def probe_config(args, seed):
    p = args.probe
    return ProbeConfig(epochs=int(p.epochs), batch_size=int(p.batch_size), lr=float(p.lr),
                       train_fraction=float(p.train_fraction), seed=seed)


def probe_cmd(args):
    run = load_run(args)
    model, seed, corpus = run.model, run.seed, run.corpus
    out = prepare_out_dir(output_dir(args), args.force)
    manifest = start_manifest(args, out, ['probe.csv'], run=run)
    result = linear_probe(model, corpus, probe_config(args, seed), num_classes=synth.NUM_CLASSES)
    write_csv(os.path.join(out, 'probe.csv'), ('accuracy', 'train_accuracy', 'num_train', 'num_test'),
              [[result.accuracy, result.train_accuracy, result.num_train, result.num_test]])
    manifest.finish(out)


def eval_comp(args):
    run = load_run(args)
    model, seed, corpus, vocab = run.model, run.seed, run.corpus, run.vocab
    records = held_out(corpus, seed, args)
    out = prepare_out_dir(output_dir(args), args.force)
    artifacts = ['matching.csv', 'decisions.csv'] + (['agreement.csv'] if args.compare_method else [])
    manifest = start_manifest(args, out, artifacts, run=run)
    result = compositionality_eval(model, records, vocab, args.method, int(args.samples), seed)
    counts = {kind: sum(1 for (_, k) in result.decisions if k == kind) for kind in result.accuracy}
    write_csv(os.path.join(out, 'matching.csv'), ('method', 'kind', 'accuracy', 'pairs', 'stderr'),
              [[args.method, kind, acc, counts[kind], binomial_stderr(acc, counts[kind])]
               for kind, acc in result.accuracy.items()])
    write_csv(os.path.join(out, 'decisions.csv'), ('index', 'kind', 'chosen'),
              [[i, kind, chosen] for (i, kind), chosen in sorted(result.decisions.items())])
    for kind, acc in result.accuracy.items():
        logger.info(bold(f'{args.method} {kind}: {acc:.4f} over {counts[kind]} pairs'))
    if args.compare_method:
        other = compositionality_eval(model, records, vocab, args.compare_method, int(args.samples), seed)
        agreement = decision_agreement(result.decisions, other.decisions)
        logger.info(bold(f'{args.method} / {args.compare_method} decision agreement: {agreement:.4f}'))
        write_csv(os.path.join(out, 'agreement.csv'), ('method', 'other', 'agreement'),
                  [[args.method, args.compare_method, agreement]])
    manifest.finish(out)


def evaluate_cmd(args):
    run = load_run(args)
    model, seed, corpus, vocab = run.model, run.seed, run.corpus, run.vocab
    out = prepare_out_dir(output_dir(args), args.force)
    manifest = start_manifest(args, out, ['eval.csv', 'summary.txt'], run=run)
    result = evaluate(model, corpus, vocab, args.method, probe_config(args, seed), samples=int(args.samples),
                      seed=seed, limit=args.limit or None, t_grid=tuple(args.evaluation.t_grid),
                      num_classes=synth.NUM_CLASSES)
    write_csv(os.path.join(out, 'eval.csv'), ('task', 'key', 'value'), result.rows())
    with open(os.path.join(out, 'summary.txt'), 'w', encoding='utf-8') as f:
        f.write(result.summary() + '\n')
    failed = []
    if run.objective == DEFAULT_OBJECTIVE:
        values = {f'{task}:{key}': value for task, key, value in result.rows()}
        checks = [(os.path.basename(out), *c) for c in check_row(values, Thresholds.from_args(args.acceptance))]
        failed = write_acceptance(os.path.join(out, ACCEPTANCE_FILE), checks)
    manifest.finish(out)
    if args.acceptance.check:
        raise_on_failures(failed)


def gradcheck_cmd(args):
    out = prepare_out_dir(output_dir(args), args.force)
    manifest = start_manifest(args, out, ['gradcheck.csv'])
    rows, worst = run_checks(int(args.gradcheck_seeds))
    write_csv(os.path.join(out, 'gradcheck.csv'), ('check', 'seed', 'relative_error'), rows)
    print(f'worst relative error: {worst:.3e}')
    manifest.finish(out)
    if not worst < TOLERANCE:
        raise InvariantViolation(f'gradcheck worst relative error {worst:.3e} exceeds {TOLERANCE:.0e}')


def report_cmd(args):
    out = prepare_out_dir(output_dir(args), args.force)
    manifest = start_manifest(args, out, ['runs.csv', 'by_objective.csv', 'by_window.csv', ACCEPTANCE_FILE])
    _, failed = report(list(args.runs), out, Thresholds.from_args(args.acceptance))
    manifest.finish(out)
    if args.acceptance.check:
        raise_on_failures(failed)


COMMANDS = {
    'gen-data': gen_data,
    'train': train,
    'sample': sample_cmd,
    'score': score_cmd,
    'probe': probe_cmd,
    'eval-comp': eval_comp,
    'evaluate': evaluate_cmd,
    'gradcheck': gradcheck_cmd,
    'report': report_cmd,
}


def run(args):
    if args.cmd not in COMMANDS:
        raise ValueError(f'unknown cmd {args.cmd!r}; expected one of {sorted(COMMANDS)}')
    set_default_dtype(int(args.precision))
    COMMANDS[args.cmd](args)
