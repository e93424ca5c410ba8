import re

import pytest

import SlowPool
from data import load_sequence


TRAIN_FLAGS = ['--epochs', '3', '--pairs-per-epoch', '16', '--batch-size', '4',
               '--hidden', '8', '--group', '2', '--stride', '2', '--seed', '1']


@pytest.fixture
def sequence(tmp_path):
    path = tmp_path / "seq.sfv"
    code = SlowPool.run(['gen-data', '--kind', 'translating_blob', '--frames', '12', '--size', '6',
                         '--vel', '0,1', '--seed', '7', '--out', str(path)])
    assert code == 0
    return path


def test_gen_data_round_trip(tmp_path, capsys):
    path = tmp_path / "seq.sfv"
    code = SlowPool.run(['gen-data', '--kind', 'translating_blob', '--frames', '64', '--size', '16',
                         '--vel', '0,1', '--seed', '7', '--out', str(path)])
    assert code == 0
    assert path.exists()
    assert load_sequence(path).T == 64
    assert "frames: 64" in capsys.readouterr().out


def test_grad_check_exit_code_follows_threshold(capsys):
    code = SlowPool.run(['grad-check', '--seed', '3', '--dim', '16', '--hidden', '24',
                         '--group', '4', '--stride', '2', '--step', '1e-5'])
    out = capsys.readouterr().out
    error = float(re.search(r"max_rel_error: (\S+)", out).group(1))
    checked = int(re.search(r"checked: (\d+)", out).group(1))
    excluded = int(re.search(r"excluded: (\d+)", out).group(1))
    failed = error > 1e-4 or excluded / (checked + excluded) >= 0.05
    assert code == (3 if failed else 0)


def test_grad_check_zero_threshold_fails():
    assert SlowPool.run(['grad-check', '--dim', '4', '--hidden', '4', '--group', '2',
                         '--threshold', '0']) == 3


def test_train_then_eval(sequence, tmp_path, capsys):
    model = tmp_path / "model.ckpt"
    report = tmp_path / "train.csv"
    capsys.readouterr()
    code = SlowPool.run(['train', '--data', str(sequence), '--objective', 'full', '--alpha', '0.5',
                         '--beta', '1', '--out', str(model), '--report', str(report)] + TRAIN_FLAGS)
    assert code == 0
    out = capsys.readouterr().out
    assert out == report.read_text()
    assert out.startswith("epoch,recon,sparsity,slowness,contrastive,total")
    assert len(out.splitlines()) == 4

    code = SlowPool.run(['eval', '--data', str(sequence), '--model', str(model), '--max-gap', '3'])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert sum(1 for line in lines if "_precision_at_1: " in line) == 3
    assert "gap,distance" in lines


def test_pipeline_is_deterministic(sequence, tmp_path):
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    for out in (first, second):
        assert SlowPool.run(['train', '--data', str(sequence), '--out', str(out)] + TRAIN_FLAGS) == 0
    assert first.read_bytes() == second.read_bytes()

    pictures = [tmp_path / "a.pgm", tmp_path / "b.pgm"]
    for ckpt, pgm in zip((first, second), pictures):
        assert SlowPool.run(['export-dict', '--model', str(ckpt), '--out', str(pgm)]) == 0
    assert pictures[0].read_bytes() == pictures[1].read_bytes()
    assert pictures[0].read_bytes().startswith(b"P5")


def test_drlim_objective(sequence, tmp_path):
    model = tmp_path / "drlim.ckpt"
    assert SlowPool.run(['train', '--data', str(sequence), '--objective', 'drlim',
                         '--out', str(model)] + TRAIN_FLAGS) == 0
    assert model.exists()


def test_unknown_flag_is_usage_error(capsys):
    assert SlowPool.run(['gen-data', '--bogus', '1', '--out', 'x']) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error(capsys):
    assert SlowPool.run([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_invalid_config_is_usage_error(sequence, tmp_path):
    code = SlowPool.run(['train', '--data', str(sequence), '--out', str(tmp_path / "m.ckpt"),
                         '--batch-size', '32', '--pairs-per-epoch', '16'])
    assert code == 1
    assert SlowPool.run(['gen-data', '--frames', '1', '--out', str(tmp_path / "s.sfv")]) == 1


def test_stride_wider_than_group_is_usage_error(sequence, tmp_path):
    assert SlowPool.run(['train', '--data', str(sequence), '--out', str(tmp_path / "m.ckpt"),
                         '--group', '2', '--stride', '3']) == 1
    assert not (tmp_path / "m.ckpt").exists()
    assert SlowPool.run(['grad-check', '--group', '1', '--stride', '4']) == 1


def test_pooling_order_flag(sequence, tmp_path, capsys):
    model = tmp_path / "model.ckpt"
    assert SlowPool.run(['train', '--data', str(sequence), '--out', str(model)] + TRAIN_FLAGS) == 0
    capsys.readouterr()
    assert SlowPool.run(['eval', '--data', str(sequence), '--model', str(model), '--p', '1']) == 0
    assert "learned_precision_at_1" in capsys.readouterr().out
    assert SlowPool.run(['eval', '--data', str(sequence), '--model', str(model), '--p', '0.5']) == 1
    assert SlowPool.run(['grad-check', '--dim', '4', '--hidden', '4', '--group', '2', '--p', '3']) == 1
    other = tmp_path / "p1.ckpt"
    assert SlowPool.run(['train', '--data', str(sequence), '--out', str(other), '--p', '1'] + TRAIN_FLAGS) == 1
    assert not other.exists()


def test_missing_and_corrupt_files_are_data_errors(sequence, tmp_path):
    assert SlowPool.run(['eval', '--data', str(tmp_path / "none.sfv"),
                         '--model', str(tmp_path / "none.ckpt")]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(64))
    assert SlowPool.run(['eval', '--data', str(sequence), '--model', str(bad)]) == 2


def test_model_and_data_must_agree(sequence, tmp_path):
    other = tmp_path / "other.sfv"
    model = tmp_path / "model.ckpt"
    assert SlowPool.run(['gen-data', '--frames', '8', '--size', '4', '--out', str(other)]) == 0
    assert SlowPool.run(['train', '--data', str(other), '--out', str(model)] + TRAIN_FLAGS) == 0
    assert SlowPool.run(['eval', '--data', str(sequence), '--model', str(model)]) == 2


@pytest.mark.parametrize("command,flags", [
    ('gen-data', ['--kind', '--frames', '--vel', '--sigma']),
    ('train', ['--alpha', '--beta', '--margin', '--eps', '--lr', '--momentum', '--neighbor-prob']),
    ('eval', ['--max-gap', '--norm', '--p']),
    ('grad-check', ['--step', '--threshold', '--dim', '--p']),
])
def test_help_lists_flags_with_defaults(command, flags, capsys):
    assert SlowPool.run([command, '--help']) == 0
    out = capsys.readouterr().out
    for flag in flags:
        assert flag in out
    assert "(default:" in out
