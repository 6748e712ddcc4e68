import csv
import json
import os

import numpy as np
import pytest
from hydra import compose, initialize_config_dir
from omegaconf.errors import ConfigAttributeError, ConfigKeyError

from src import cli
from src.data import synth
from src.data.vocab import Vocabulary
from src.inference import InvariantViolation
from src.model_serializer import load_checkpoint
from src.report import AcceptanceError
from src.scoring import EXACT_MAX_TOKENS

CONF_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'conf')


def compose_args(*overrides):
    with initialize_config_dir(config_dir=CONF_DIR):
        return compose(config_name='main_config', overrides=list(overrides))


def _rows(path):
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


def _manifest(out):
    with open(os.path.join(out, cli.RUN_MANIFEST)) as f:
        return json.load(f)


@pytest.fixture
def corpus_out(tmp_path):
    out = str(tmp_path / 'corpus')
    cli.run(compose_args('cmd=gen-data', f'out={out}', 'count=40', 'seed=2'))
    return out


@pytest.fixture
def trained(tmp_path, corpus_out):
    out = str(tmp_path / 'train')
    cli.run(compose_args('cmd=train', 'experiment=debug', f'data={corpus_out}', f'out={out}', 'steps=2',
                         'warmup=0', 'batch_size=4', 'seed=1'))
    return out


def test_config_composes_in_struct_mode():
    args = compose_args('experiment=bert')
    assert args.experiment.objective == 'bert:0.15'
    with pytest.raises((ConfigAttributeError, ConfigKeyError)):
        args.not_a_key = 1


def test_merge_config_file(tmp_path):
    good = tmp_path / 'good.cfg'
    good.write_text('# overrides\nsteps=7\nexperiment.omega_lower=0.3\n')
    args = cli.merge_config_file(compose_args(f'config_file={good}'))
    assert args.steps == 7 and args.experiment.omega_lower == 0.3
    unknown = tmp_path / 'unknown.cfg'
    unknown.write_text('stepz=7\n')
    with pytest.raises((ConfigAttributeError, ConfigKeyError)):
        cli.merge_config_file(compose_args(f'config_file={unknown}'))
    malformed = tmp_path / 'malformed.cfg'
    malformed.write_text('steps 7\n')
    with pytest.raises(ValueError):
        cli.merge_config_file(compose_args(f'config_file={malformed}'))


def test_config_hash_ignores_output_location():
    a = cli.config_hash(compose_args('out=/tmp/a'))
    assert a == cli.config_hash(compose_args('out=/tmp/b', 'verbose=1'))
    assert a != cli.config_hash(compose_args('seed=5'))


def test_prepare_out_dir(tmp_path):
    out = tmp_path / 'run'
    out.mkdir()
    (out / 'stale.txt').write_text('x')
    with pytest.raises(cli.RefusalError):
        cli.prepare_out_dir(str(out), force=False)
    cli.prepare_out_dir(str(out), force=True)
    assert os.listdir(out) == []
    (out / cli.CHECKPOINT_FILE).write_bytes(b'')
    assert cli.prepare_out_dir(str(out), force=False, resumable=True) == str(out)


def test_unknown_command():
    with pytest.raises(ValueError, match='unknown cmd'):
        cli.run(compose_args('cmd=dance'))


def test_gen_data(corpus_out):
    manifest = _manifest(corpus_out)
    assert manifest['cmd'] == 'gen-data' and manifest['seed'] == 2 and manifest['finished']
    assert synth.load_manifest(corpus_out)['count'] == 40
    with pytest.raises(cli.RefusalError):
        cli.run(compose_args('cmd=gen-data', f'out={corpus_out}', 'count=40', 'seed=2'))


def test_train_writes_checkpoint_and_metrics(trained):
    manifest = _manifest(trained)
    assert manifest['objective'] == 'mdc' and manifest['window'] == '[0.5,1]'
    assert os.path.exists(os.path.join(trained, cli.CHECKPOINT_FILE))
    assert [r['step'] for r in _rows(os.path.join(trained, 'metrics.csv'))] == ['0', '1']


def test_training_defaults_to_single_precision(trained):
    assert compose_args().precision == 32
    state = load_checkpoint(os.path.join(trained, cli.CHECKPOINT_FILE)).model_state()
    assert {array.dtype for array in state.values()} == {np.dtype(np.float32)}


def test_sample_and_probe(tmp_path, corpus_out, trained):
    ckpt = os.path.join(trained, cli.CHECKPOINT_FILE)
    out = str(tmp_path / 'sample')
    cli.run(compose_args('cmd=sample', f'data={corpus_out}', f'ckpt={ckpt}', f'out={out}', 'num=2', 'length=5'))
    rows = _rows(os.path.join(out, 'samples.csv'))
    assert len(rows) == 2 and all(len(r['caption'].split()) == 5 for r in rows)
    assert _manifest(out)['seed'] == 1

    probe_out = str(tmp_path / 'probe')
    cli.run(compose_args('cmd=probe', f'data={corpus_out}', f'ckpt={ckpt}', f'out={probe_out}', 'probe.epochs=1'))
    (row,) = _rows(os.path.join(probe_out, 'probe.csv'))
    assert int(row['num_train']) + int(row['num_test']) == 40
    assert _manifest(probe_out)['objective'] == 'mdc'


def test_score_elbo_exact_refuses_long_captions(tmp_path, corpus_out, trained):
    ckpt = os.path.join(trained, cli.CHECKPOINT_FILE)
    out = str(tmp_path / 'score')
    args = compose_args('cmd=score', f'data={corpus_out}', f'ckpt={ckpt}', f'out={out}', 'method=elbo_exact',
                        'limit=3')
    records = cli.held_out(cli.load_corpus(corpus_out)[0], 1, args)
    vocab = synth.load_vocab(corpus_out)
    lengths = [len(vocab.strip(c)) for r in records for c in [r.caption] + list(r.negatives.values())]
    if max(lengths) > EXACT_MAX_TOKENS:
        with pytest.raises(cli.RefusalError, match='N <= 10'):
            cli.run(args)
        assert not os.path.exists(out)
    else:
        cli.run(args)
        assert len(_rows(os.path.join(out, 'scores.csv'))) == len(lengths)


def test_score_heuristic_rows(tmp_path, corpus_out, trained):
    ckpt = os.path.join(trained, cli.CHECKPOINT_FILE)
    out = str(tmp_path / 'score')
    cli.run(compose_args('cmd=score', f'data={corpus_out}', f'ckpt={ckpt}', f'out={out}', 'method=heuristic',
                         'limit=2'))
    rows = _rows(os.path.join(out, 'scores.csv'))
    assert rows and all(r['method'] == 'heuristic' and float(r['value']) < 0 for r in rows)
    assert rows[0]['pair_id'].endswith(':true')


def test_vocabulary_mismatch_is_refused(tmp_path, trained):
    other = str(tmp_path / 'other')
    words = Vocabulary().words
    synth.write_corpus(other, 10, 0, Vocabulary(words[:4] + list(reversed(words[4:]))), progress=False)
    ckpt = os.path.join(trained, cli.CHECKPOINT_FILE)
    with pytest.raises(cli.RefusalError, match='does not match'):
        cli.run(compose_args('cmd=probe', f'data={other}', f'ckpt={ckpt}', f'out={tmp_path / "p"}'))


def test_tampered_vocab_sidecar_is_refused(corpus_out):
    with open(os.path.join(corpus_out, synth.VOCAB_FILE), 'w') as f:
        json.dump({'words': list(reversed(Vocabulary().words))}, f)
    with pytest.raises(cli.RefusalError, match='sidecar'):
        cli.load_corpus(corpus_out)


def test_eval_comp_random_with_agreement(tmp_path, corpus_out, trained):
    ckpt = os.path.join(trained, cli.CHECKPOINT_FILE)
    out = str(tmp_path / 'comp')
    cli.run(compose_args('cmd=eval-comp', f'data={corpus_out}', f'ckpt={ckpt}', f'out={out}', 'method=random',
                         'compare_method=random'))
    kinds = {r['kind'] for r in _rows(os.path.join(out, 'matching.csv'))}
    assert {'replace', 'shuffle'} <= kinds
    (agreement,) = _rows(os.path.join(out, 'agreement.csv'))
    assert float(agreement['agreement']) == 1.0


def test_gradcheck_command(tmp_path, capsys):
    out = str(tmp_path / 'gradcheck')
    cli.run(compose_args('cmd=gradcheck', f'out={out}', 'gradcheck_seeds=1'))
    assert 'worst relative error' in capsys.readouterr().out
    assert _rows(os.path.join(out, 'gradcheck.csv'))


def test_gradcheck_failure_raises(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, 'run_checks', lambda seeds: ([('add', 0, 1.0)], 1.0))
    with pytest.raises(InvariantViolation):
        cli.run(compose_args('cmd=gradcheck', f'out={tmp_path / "g"}'))


def test_report_groups_runs(tmp_path, trained):
    out = str(tmp_path / 'report')
    cli.run(compose_args('cmd=report', f'out={out}', f'runs=[{trained}]'))
    (row,) = _rows(os.path.join(out, 'runs.csv'))
    assert row['objective'] == 'mdc' and row['window'] == '[0.5,1]'
    (group,) = _rows(os.path.join(out, 'by_objective.csv'))
    assert group['runs'] == '1'


def test_report_acceptance_check_fails_the_command(tmp_path, trained):
    with open(os.path.join(trained, 'probe.csv'), 'w') as f:
        f.write('accuracy,train_accuracy,num_train,num_test\n0.1,0.2,32,8\n')
    out = str(tmp_path / 'report')
    cli.run(compose_args('cmd=report', f'out={out}', f'runs=[{trained}]'))
    (row,) = _rows(os.path.join(out, 'acceptance.csv'))
    assert (row['criterion'], row['passed']) == ('probe_accuracy', 'False')
    with pytest.raises(AcceptanceError):
        cli.run(compose_args('cmd=report', f'out={tmp_path / "checked"}', f'runs=[{trained}]',
                             'acceptance.check=true'))
