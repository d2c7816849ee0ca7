import pandas as pd
import pytest

from pipeline.cli import EXIT_DATA, EXIT_USAGE, main
from pipeline.imgproc import make_rng, save_image
from pipeline.nnet import init_params, load_model, save_model
from pipeline.simworld.scenario import write_scenario


@pytest.fixture
def tiny_model(tmp_path, tiny_spec):
    return save_model(tmp_path / 'tiny.bcw', tiny_spec, init_params(tiny_spec, make_rng(1)))


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(['fly']) == EXIT_USAGE
    assert main(['--help']) == 0


def test_balance_report(small_dataset, capsys):
    _, manifest = small_dataset
    assert main(['balance', str(manifest)]) == 0
    out = capsys.readouterr().out
    # 4 zero-steering samples at rate 0.7
    assert 'zero-steering samples d = 4, deletion rate = 0.7, deleted D = 3, kept = 9' in out
    assert out.splitlines()[-2].split()[-2:] == ['12', '9']


def test_balance_missing_manifest(tmp_path):
    assert main(['balance', str(tmp_path / 'nope.csv')]) == EXIT_DATA


def test_activations_writes_one_png_per_channel(tmp_path, tiny_model, frame, capsys):
    frame_path = save_image(frame, tmp_path / 'frame.png')
    out_dir = tmp_path / 'maps'
    assert main(['activations', str(tiny_model), str(frame_path), '--layer', '2', '--out', str(out_dir)]) == 0
    assert sorted(p.name for p in out_dir.iterdir()) == ['layer2_map00.png', 'layer2_map01.png', 'layer2_map02.png']
    assert 'Wrote 3 maps of 2x2' in capsys.readouterr().out
    assert main(['activations', str(tiny_model), str(frame_path), '--layer', '3', '--out', str(out_dir)]) == EXIT_USAGE


def test_corrupt_model_is_a_data_error(tmp_path, frame):
    bad = tmp_path / 'bad.bcw'
    bad.write_bytes(b'not a model')
    frame_path = save_image(frame, tmp_path / 'frame.png')
    assert main(['activations', str(bad), str(frame_path)]) == EXIT_DATA
    assert main(['evaluate', str(tmp_path / 'missing.bcw')]) == EXIT_DATA


def test_predict_analyze(tmp_path, small_dataset, tiny_model, capsys):
    _, manifest = small_dataset
    out = tmp_path / 'trace.csv'
    assert main(['predict-analyze', str(tiny_model), str(manifest), '--start', '2', '--count', '6',
                 '--out', str(out)]) == 0
    trace = pd.read_csv(out)
    assert len(trace) == 6
    assert trace['t'].tolist() == [1.0, 1.5, 2.0, 2.5, 3.0, 3.5]
    assert '6 frames' in capsys.readouterr().out


def test_augment_preview(tmp_path, small_dataset):
    _, manifest = small_dataset
    out_dir = tmp_path / 'preview'
    assert main(['augment-preview', str(manifest), '--index', '6', '--out', str(out_dir)]) == 0
    names = sorted(p.name for p in out_dir.iterdir())
    assert len(names) == 10
    assert names[0] == '00_original.png'
    assert names[-1] == '09_normalized.png'
    assert main(['augment-preview', str(manifest), '--index', '12', '--out', str(out_dir)]) == EXIT_USAGE


def test_train_writes_model_and_history(tmp_path, small_dataset, capsys):
    _, manifest = small_dataset
    model = tmp_path / 'model.bcw'
    args = ['train', str(manifest), '--epochs', '1', '--batch-size', '4', '--augmentation-loops', '1',
            '--out', str(model), '--tracking-db', str(tmp_path / 'runs.duckdb'), '--seed', '3']
    assert main(args) == 0
    spec, params = load_model(model)
    assert spec.input_shape == (64, 64, 3)
    history = pd.read_csv(model.with_suffix('.history.csv'))
    assert history['epoch'].tolist() == [1]
    assert 'sha256' in capsys.readouterr().out

    assert main(['runs', '--tracking-db', str(tmp_path / 'runs.duckdb')]) == 0
    assert 'training_runs: 1 rows' in capsys.readouterr().out


def test_collect_from_a_scenario_file(tmp_path, oval, capsys):
    scenario = write_scenario(oval, tmp_path / 'oval.scn')
    out_dir = tmp_path / 'demo'
    args = ['collect', '--scenario', str(scenario), '--laps', '1', '--cameras', '1', '--no-bidirectional',
            '--out', str(out_dir), '--tracking-db', str(tmp_path / 'runs.duckdb')]
    assert main(args) == 0
    assert (out_dir / 'driving_log.csv').exists()
    assert 'Manifest:' in capsys.readouterr().out


def test_collect_collision_records_center_frames_only(tmp_path, capsys):
    out_dir = tmp_path / 'demo'
    args = ['collect', '--scenario', 'collision', '--laps', '1', '--rate-hz', '0.5',
            '--out', str(out_dir), '--tracking-db', str(tmp_path / 'runs.duckdb')]
    assert main(args) == 0
    manifest = pd.read_csv(out_dir / 'driving_log.csv')
    assert len(manifest) > 0
    assert manifest['left'].isna().all()
    assert manifest['right'].isna().all()
    assert not any(p.name.startswith(('left', 'right')) for p in (out_dir / 'IMG').iterdir())


def test_collect_collision_rejects_side_cameras(tmp_path):
    args = ['collect', '--scenario', 'collision', '--cameras', '3', '--laps', '1', '--out', str(tmp_path / 'demo'),
            '--tracking-db', str(tmp_path / 'runs.duckdb')]
    assert main(args) == EXIT_USAGE
    assert not (tmp_path / 'demo').exists()


def test_bad_run_config_file(tmp_path, small_dataset):
    _, manifest = small_dataset
    config = tmp_path / 'run.toml'
    config.write_text('[run]\nepochz = 3\n')
    assert main(['train', str(manifest), '--config', str(config)]) == EXIT_USAGE


def test_runs_on_an_empty_ledger(tmp_path, capsys):
    assert main(['runs', '--tracking-db', str(tmp_path / 'empty.duckdb')]) == 0
    out = capsys.readouterr().out
    assert 'collection_runs: 0 rows' in out
    assert 'experiment_results: 0 rows' in out
