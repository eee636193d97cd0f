#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Copyright (c) 2024 Pyvrd developers
#
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.

"""Unit testing the command line."""

import json
import logging
import os
from unittest.mock import patch

import numpy as np
import pytest

from pyvrd import cli
from pyvrd import config as pyvrd_config
from pyvrd.checkpoint import TensorStore, read_store, write_store
from pyvrd.ingest import (read_relation_predictions, read_relations, read_vocabulary, write_detections,
                          write_relation_predictions, write_relations, write_score_table, write_vocabulary)
from pyvrd.synthetic import generate_corpus, synthetic_visual_scores
from pyvrd.tests.data import DETECTIONS_CSV, RELATION_HEADER, RELATIONS_CSV, VOCABULARY_YAML, write_text


@pytest.fixture(autouse=True)
def quiet_logging():
    """Keep the command line from replacing the log handlers of the test run."""
    with patch('pyvrd.cli.logging_off') as off, patch('pyvrd.cli.logging_on') as on, \
            patch('pyvrd.cli.debug_on') as debug:
        yield off, on, debug


@pytest.fixture
def fixture_files(tmp_path):
    """Vocabulary and relation files of the hand-written fixture."""
    return {'vocabulary': write_text(tmp_path / 'vocabulary.yaml', VOCABULARY_YAML),
            'relations': write_text(tmp_path / 'relations.csv', RELATIONS_CSV)}


def _exact_prediction_file(tmp_path, fixture_files):
    classes, triplet_vocab = read_vocabulary(fixture_files['vocabulary'])
    truth = read_relations(fixture_files['relations'], classes, triplet_vocab)
    first = truth.relations['img1'][0]._replace(score=0.9)
    path = str(tmp_path / 'predictions.csv')
    write_relation_predictions(path, [first], triplet_vocab)
    return path


def test_eval_exact_match(tmp_path, fixture_files, capsys):
    """One exact prediction of the only 'holds' relation gives a mAP of 1."""
    pred = _exact_prediction_file(tmp_path, fixture_files)
    json_out = str(tmp_path / 'report.json')
    status = cli.main(['eval', '--pred', pred, '--gt', fixture_files['relations'],
                       '--vocabulary', fixture_files['vocabulary'], '--predicates', 'holds',
                       '--json-out', json_out])
    assert status == 0
    with open(json_out) as fd_:
        report = json.load(fd_)
    assert report['map_rel'] == {'predictions': 1.0}
    assert report['per_predicate'] == {'holds': {'predictions': 1.0}}
    assert 'mAP_rel' in capsys.readouterr().out
    with open(json_out + '.config.json') as fd_:
        echo = json.load(fd_)
    assert echo['command'] == 'eval'
    assert echo['seed'] == 0
    assert echo['config']['eval']['iou_threshold'] == 0.5


def test_eval_all_predicates(tmp_path, fixture_files):
    """Predicates without any prediction get an AP of 0."""
    pred = _exact_prediction_file(tmp_path, fixture_files)
    json_out = str(tmp_path / 'report.json')
    cli.main(['eval', '--pred', pred, '--gt', fixture_files['relations'],
              '--vocabulary', fixture_files['vocabulary'], '--json-out', json_out, '--label', 'run1'])
    with open(json_out) as fd_:
        report = json.load(fd_)
    assert report['map_rel'] == {'run1': 0.25}
    assert sorted(report['per_predicate']) == ['holds', 'is', 'on', 'plays']


def test_data_error_exit_status(tmp_path, fixture_files, capsys):
    """A data error exits with 1 and one JSON line naming the error."""
    bad = write_text(tmp_path / 'bad.csv', RELATION_HEADER + "img1,camera,0.3,0.4,0.2,0.3,man,0.1,0.5,0.1,0.9,holds\n")
    status = cli.main(['eval', '--pred', str(tmp_path / 'unread.csv'), '--gt', bad,
                       '--vocabulary', fixture_files['vocabulary']])
    assert status == 1
    message = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert message['error'] == 'UnknownTriplet'
    assert message['module'] == 'pyvrd.ingest'
    status = cli.main(['eval', '--pred', str(tmp_path / 'missing.csv'), '--gt', fixture_files['relations'],
                       '--vocabulary', fixture_files['vocabulary']])
    assert status == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['error'] == 'FileNotFoundError'


@pytest.mark.parametrize('argv', [
    ['eval'],
    ['frobnicate'],
    ['demo', '--images', 'many'],
    ['aggregate', '--vocabulary', 'v', '--annotations', 'a', '--model', 'm', '--split', 's',
     '--visual-scores', 't', '--predictions', 'p'],
    ['pwt', '--src', 's', '--head', 'h', '--task-classes', 't', '--out', 'o'],
    ['demo', '--config', 'does/not/exist.yaml'],
    ['demo', '--images', '0'],
    ['nms', '--model', 'a.csv', '--classes', 'c', '--iou', '1.5', '--out', 'o'],
    ['nms', '--model', 'a.csv', '--classes', 'c', '--iou', '0', '--out', 'o'],
    ['nms', '--model', 'a.csv', '--classes', 'c', '--score-floor', '-0.1', '--out', 'o'],
    ['sample', '--vocabulary', 'v', '--annotations', 'a', '--count', '5', '--cap-n', '0', '--out', 'o'],
    ['sample', '--vocabulary', 'v', '--annotations', 'a', '--count', '5', '--cap-n', '2.5', '--out', 'o'],
    ['sample', '--vocabulary', 'v', '--annotations', 'a', '--count', '0', '--out', 'o'],
    ['sample', '--vocabulary', 'v', '--annotations', 'a', '--count', '-3', '--out', 'o'],
    ['train', '--vocabulary', 'v', '--annotations', 'a', '--rounds', '0'],
    ['train', '--vocabulary', 'v', '--annotations', 'a', '--sample-count', '-1'],
    ['score', '--vocabulary', 'v', '--detections', 'd', '--top-m', '0', '--out', 'o'],
    ['score', '--vocabulary', 'v', '--detections', 'd', '--out', 'o', '--gt', 'g'],
    ['pwt', '--src', 's', '--head', 'h', '--task-classes', 't', '--map', 'm', '--init-std', '-1', '--out', 'o'],
])
def test_usage_errors(argv):
    """Usage errors exit with status 2."""
    with pytest.raises(SystemExit) as err:
        cli.main(argv)
    assert err.value.code == 2


def test_usage_error_names_the_value(capsys):
    """A rejected option value is named on stderr."""
    with pytest.raises(SystemExit):
        cli.main(['sample', '--vocabulary', 'v', '--annotations', 'a', '--count', '5', '--cap-n', '2.5',
                  '--out', 'o'])
    err = capsys.readouterr().err
    assert "--cap-n" in err
    assert "expected a positive integer or 'inf', got '2.5'" in err


def _last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def _pwt_inputs(tmp_path):
    src = TensorStore([('head.cls.weight', np.ones((3, 2)))])
    src_path = str(tmp_path / 'src.pwt')
    write_store(src, src_path)
    classes = write_text(tmp_path / 'classes.txt', "man\ncamera\nguitar\n")
    return ['pwt', '--src', src_path, '--head', 'head.cls.weight', '--task-classes', classes,
            '--out', str(tmp_path / 'out.pwt')]


@pytest.mark.parametrize('content', ['{"man": "camera",', '["man", "camera"]', '{"man": 3}'])
def test_malformed_class_map(tmp_path, capsys, content):
    """A class map that is not an object of names exits with 1 and a JSON error line."""
    mapping = write_text(tmp_path / 'map.json', content)
    assert cli.main(_pwt_inputs(tmp_path) + ['--map', mapping]) == 1
    message = _last_error(capsys)
    assert message['error'] == 'BadClassMap'
    assert message['module'] == 'pyvrd.checkpoint'
    assert mapping in message['message']
    assert not os.path.exists(str(tmp_path / 'out.pwt'))


@pytest.mark.parametrize('argv_tail, user_config', [
    (['--model', 'a.csv:-1'], None),
    (['--model', 'a.csv'], "ensemble:\n  iou_threshold: 1.5\n"),
    (['--model', 'a.csv'], "ensemble:\n  score_floor: 2\n"),
])
def test_bad_values_exit_with_one(tmp_path, capsys, argv_tail, user_config):
    """Bad values met after parsing exit with 1 and a JSON error line instead of a traceback."""
    classes = write_text(tmp_path / 'classes.txt', "man\ncamera\nguitar\n")
    write_text(tmp_path / 'a.csv', DETECTIONS_CSV)
    argv = ['nms', '--classes', classes, '--out', str(tmp_path / 'fused.csv')]
    argv += [item.replace('a.csv', str(tmp_path / 'a.csv')) for item in argv_tail]
    if user_config is not None:
        argv += ['--config', write_text(tmp_path / 'user.yaml', user_config)]
    assert cli.main(argv) == 1
    message = _last_error(capsys)
    assert message['error'] == 'ValueError'
    assert message['module'] == 'builtins'


def test_bad_sampler_cap_in_config(tmp_path, fixture_files, capsys):
    """A configured cap of 0 is refused with exit status 1."""
    user = write_text(tmp_path / 'user.yaml', "sampler:\n  cap: 0\n")
    assert cli.main(['sample', '--vocabulary', fixture_files['vocabulary'], '--annotations',
                     fixture_files['relations'], '--count', '5', '--config', user,
                     '--out', str(tmp_path / 'ids.txt')]) == 1
    assert "Sampler cap" in _last_error(capsys)['message']


def test_boolean_words_in_vocabulary(tmp_path, capsys):
    """Unquoted yes, no, on and off in a vocabulary file stay names on the command line."""
    vocabulary = write_text(tmp_path / 'vocabulary.yaml',
                            "classes: [cup, desk, yes]\nattributes: [off]\npredicates: [on, no, is]\n"
                            "triplets:\n  - [cup, on, desk]\n  - [yes, no, cup]\n  - [desk, is, off]\n")
    relations = write_text(tmp_path / 'relations.csv', RELATION_HEADER +
                           "img1,cup,0.1,0.3,0.1,0.3,desk,0.2,0.9,0.5,0.9,on\n"
                           "img1,yes,0.5,0.6,0.1,0.2,cup,0.1,0.3,0.1,0.3,no\n"
                           "img2,desk,0.2,0.9,0.5,0.9,off,0,0,0,0,is\n")
    classes, triplet_vocab = read_vocabulary(vocabulary)
    pred = str(tmp_path / 'predictions.csv')
    write_relation_predictions(pred, list(read_relations(relations, classes, triplet_vocab).all_relations()),
                               triplet_vocab)
    json_out = str(tmp_path / 'report.json')
    assert cli.main(['eval', '--pred', pred, '--gt', relations, '--vocabulary', vocabulary,
                     '--predicates', 'on,no', '--json-out', json_out]) == 0
    with open(json_out) as fd_:
        report = json.load(fd_)
    assert report['per_predicate'] == {'no': {'predictions': 1.0}, 'on': {'predictions': 1.0}}
    out = str(tmp_path / 'ids.txt')
    assert cli.main(['sample', '--vocabulary', vocabulary, '--annotations', relations, '--count', '4',
                     '--cap-n', 'inf', '--out', out]) == 0
    with open(out) as fd_:
        assert set(fd_.read().split()) <= {'img1', 'img2'}


def test_verbosity(quiet_logging, tmp_path, fixture_files):
    """No flag silences logging, -v turns on info and -vv debug output."""
    off, on, debug = quiet_logging
    pred = _exact_prediction_file(tmp_path, fixture_files)
    base = ['eval', '--pred', pred, '--gt', fixture_files['relations'], '--vocabulary', fixture_files['vocabulary']]
    cli.main(base)
    assert off.call_count == 1
    cli.main(base + ['-v'])
    on.assert_called_once_with(logging.INFO)
    cli.main(['-vv'] + base)
    assert debug.call_count == 1


def test_user_config(tmp_path, fixture_files):
    """--config is merged for the run only and echoed."""
    user = write_text(tmp_path / 'user.yaml', "eval:\n  iou_threshold: 0.9\n")
    pred = _exact_prediction_file(tmp_path, fixture_files)
    json_out = str(tmp_path / 'report.json')
    before = pyvrd_config.CONFIG_FILE
    cli.main(['eval', '--pred', pred, '--gt', fixture_files['relations'], '--vocabulary',
              fixture_files['vocabulary'], '--config', user, '--json-out', json_out])
    assert pyvrd_config.CONFIG_FILE == before
    with open(json_out) as fd_:
        assert json.load(fd_)['config']['iou_threshold'] == 0.9
    with open(json_out + '.config.json') as fd_:
        echo = json.load(fd_)
    assert echo['options']['config'] == user
    assert echo['config']['eval'] == {'iou_threshold': 0.9, 'predicate_scoped': True}


def test_sample(tmp_path, fixture_files):
    """The id list, its metadata and the config echo are written; reruns are identical."""
    outputs = []
    for name in ('first', 'second'):
        out = str(tmp_path / name)
        assert cli.main(['sample', '--vocabulary', fixture_files['vocabulary'], '--annotations',
                         fixture_files['relations'], '--count', '25', '--cap-n', 'inf', '--seed', '3',
                         '--out', out]) == 0
        with open(out) as fd_:
            outputs.append(fd_.read())
    assert outputs[0] == outputs[1]
    ids = outputs[0].split()
    assert len(ids) == 25
    assert set(ids) <= {'img1', 'img2', 'img3'}
    with open(str(tmp_path / 'first.json')) as fd_:
        assert json.load(fd_)['count'] == 25
    with open(str(tmp_path / 'first.config.json')) as fd_:
        echo = json.load(fd_)
    assert echo['seed'] == 3
    assert echo['options']['cap_n'] == 'inf'


def test_pwt_transfers_44_of_57(tmp_path, caplog):
    """The 44-of-57 class map transfers 44 rows and initializes 13."""
    rng = np.random.default_rng(0)
    src = TensorStore([('backbone.conv1', rng.normal(size=(4, 3))),
                       ('head.cls.weight', rng.normal(size=(80, 8))),
                       ('head.cls.bias', rng.normal(size=(80,)))])
    src_path = str(tmp_path / 'src.pwt')
    write_store(src, src_path)
    source_names = ['source%02d' % idx for idx in range(80)]
    task_names = ['task%02d' % idx for idx in range(57)]
    write_text(tmp_path / 'source.txt', '\n'.join(source_names) + '\n')
    write_text(tmp_path / 'task.txt', '\n'.join(task_names) + '\n')
    mapping = {task_names[idx]: source_names[idx + 10] for idx in range(44)}
    write_text(tmp_path / 'map.json', json.dumps(mapping))
    out = str(tmp_path / 'task.pwt')
    with caplog.at_level(logging.INFO, logger='pyvrd'):
        status = cli.main(['pwt', '--src', src_path, '--head', 'head.cls.weight', '--bias', 'head.cls.bias',
                           '--task-classes', str(tmp_path / 'task.txt'),
                           '--source-classes', str(tmp_path / 'source.txt'),
                           '--map', str(tmp_path / 'map.json'), '--seed', '1', '--out', out])
    assert status == 0
    assert "transferred 44, initialized 13" in caplog.text
    result = read_store(out)
    assert result['head.cls.weight'].shape == (57, 8)
    np.testing.assert_array_equal(result['head.cls.weight'][:44], src['head.cls.weight'][10:54])
    assert result.digest('backbone.conv1') == src.digest('backbone.conv1')
    assert os.path.isfile(out + '.config.json')


def test_nms(tmp_path):
    """Two identical detection files fuse to one detection per box."""
    classes = write_text(tmp_path / 'classes.txt', "man\ncamera\nguitar\n")
    first = write_text(tmp_path / 'a.csv', DETECTIONS_CSV)
    second = write_text(tmp_path / 'b.csv', DETECTIONS_CSV)
    out = str(tmp_path / 'fused.csv')
    assert cli.main(['nms', '--model', first + ':0.7', '--model', second + ':0.3', '--classes', classes,
                     '--out', out]) == 0
    with open(out) as fd_:
        lines = fd_.read().splitlines()
    assert len(lines) == 4
    assert lines[0].startswith('ImageID,LabelName')


def test_stage_commands(tmp_path):
    """train, score and aggregate run in sequence on a small synthetic corpus."""
    corpus = generate_corpus(60, seed=3)
    vocabulary = str(tmp_path / 'vocabulary.yaml')
    annotations = str(tmp_path / 'relations.csv')
    write_vocabulary(vocabulary, corpus.triplet_vocab)
    write_relations(annotations, corpus)
    user = write_text(tmp_path / 'user.yaml', "stages:\n  split: [0.5, 0.25, 0.25]\n"
                                              "gbm:\n  spatio_semantic: {lambda: 1.0, gamma: 0.0}\n"
                                              "  aggregator: {lambda: 1.0, gamma: 0.0, max_depth: 3}\n")
    model = str(tmp_path / 'model')
    common = ['--vocabulary', vocabulary, '--annotations', annotations, '--config', user, '--seed', '5']

    assert cli.main(['train'] + common + ['--rounds', '5', '--out', model]) == 0
    for name in ('stats.h5', 'split.json', 'config.json', 'stage2/manifest.json'):
        assert os.path.exists(os.path.join(model, name))
    with open(os.path.join(model, 'config.json')) as fd_:
        assert json.load(fd_)['config']['stages']['split'] == [0.5, 0.25, 0.25]

    detections = str(tmp_path / 'detections.csv')
    write_detections(detections, [det for dets in corpus.boxes.values() for det in dets], corpus.vocabulary)
    scored = str(tmp_path / 'scored.csv')
    assert cli.main(['score', '--model', model, '--vocabulary', vocabulary, '--detections', detections,
                     '--top-m', '5', '--out', scored]) == 0
    classes, triplet_vocab = read_vocabulary(vocabulary)
    instances = read_relation_predictions(scored, triplet_vocab)
    assert 0 < len(instances) <= 5 * len(corpus)

    table = synthetic_visual_scores(corpus, seed=5)
    visual = str(tmp_path / 'visual.csv')
    write_score_table(visual, table)
    rescored = str(tmp_path / 'rescored.csv')
    assert cli.main(['aggregate'] + common + ['--model', model, '--split', os.path.join(model, 'split.json'),
                                              '--visual-scores', visual, '--rounds', '5',
                                              '--predictions', scored, '--out', rescored]) == 0
    assert os.path.exists(os.path.join(model, 'aggregator', 'manifest.json'))
    assert os.path.exists(os.path.join(model, 'aggregator', 'config.json'))
    assert len(read_relation_predictions(rescored, triplet_vocab)) == len(instances)
    assert not os.path.exists(rescored + '.missing.json')


def test_model_dir_and_feature_export(tmp_path):
    """Without --out or --model the configured model_dir is used; score can export its candidate pairs."""
    corpus = generate_corpus(40, seed=3)
    vocabulary = str(tmp_path / 'vocabulary.yaml')
    annotations = str(tmp_path / 'relations.csv')
    write_vocabulary(vocabulary, corpus.triplet_vocab)
    write_relations(annotations, corpus)
    model_dir = str(tmp_path / 'models')
    user = write_text(tmp_path / 'user.yaml', "model_dir: %s\nstages:\n  split: [0.5, 0.25, 0.25]\n"
                                              "gbm:\n  spatio_semantic: {lambda: 1.0, gamma: 0.0}\n" % model_dir)
    assert cli.main(['train', '--vocabulary', vocabulary, '--annotations', annotations, '--config', user,
                     '--rounds', '3']) == 0
    assert os.path.exists(os.path.join(model_dir, 'stage2', 'manifest.json'))

    detections = str(tmp_path / 'detections.csv')
    write_detections(detections, [det for dets in corpus.boxes.values() for det in dets], corpus.vocabulary)
    export = str(tmp_path / 'export')
    assert cli.main(['score', '--vocabulary', vocabulary, '--detections', detections, '--config', user,
                     '--out', str(tmp_path / 'scored.csv'), '--export-features', export,
                     '--gt', annotations]) == 0
    with open(os.path.join(model_dir, 'stage2', 'manifest.json')) as fd_:
        predicate_ids = sorted(int(pid) for pid in json.load(fd_)['files'])
    assert sorted(os.listdir(export)) == sorted(name for pid in predicate_ids for name in
                                                ('predicate_%03d.features.csv' % pid,
                                                 'predicate_%03d.crops.jsonl' % pid))
    with open(os.path.join(export, 'predicate_%03d.features.csv' % predicate_ids[0])) as fd_:
        rows = fd_.read().splitlines()
    assert rows[0].endswith(',label')
    labels = [int(row.rsplit(',', 1)[1]) for row in rows[1:]]
    assert set(labels) == {0, 1}
    with open(os.path.join(export, 'predicate_%03d.crops.jsonl' % predicate_ids[0])) as fd_:
        crops = [json.loads(line) for line in fd_]
    assert 0 < len(crops) <= len(labels)
    assert set(crops[0]) == {'image_id', 'subject_key', 'object_key', 'crop', 'keep_regions'}


def test_aggregate_needs_split(tmp_path):
    """aggregate refuses to invent a split plan."""
    corpus = generate_corpus(5, seed=3)
    vocabulary = str(tmp_path / 'vocabulary.yaml')
    annotations = str(tmp_path / 'relations.csv')
    write_vocabulary(vocabulary, corpus.triplet_vocab)
    write_relations(annotations, corpus)
    status = cli.main(['aggregate', '--vocabulary', vocabulary, '--annotations', annotations,
                       '--model', str(tmp_path), '--split', str(tmp_path / 'nowhere.json'),
                       '--visual-scores', str(tmp_path / 'visual.csv')])
    assert status == 1


def test_demo_is_reproducible(tmp_path, capsys):
    """Two demo runs with one seed print and write identical reports."""
    outputs = []
    for name in ('first.json', 'second.json'):
        json_out = str(tmp_path / name)
        assert cli.main(['demo', '--seed', '7', '--images', '60', '--rounds', '10', '--json-out', json_out]) == 0
        with open(json_out, 'rb') as fd_:
            outputs.append((capsys.readouterr().out, fd_.read()))
    assert outputs[0] == outputs[1]
    report = json.loads(outputs[0][1].decode('utf-8'))
    assert report['variants'] == ['Spatio-Semantic', 'Visual', 'Avg.', '3rd Stage']
    assert sorted(report['per_predicate']) == ['above', 'inside_of', 'next_to']


def test_demo_quality():
    """On the default corpus the stage-two models recover the planted relations and aggregation beats averaging."""
    report = cli.run_demo(seed=0)
    scores = report.to_dict()['map_rel']
    assert scores['Spatio-Semantic'] >= 0.9
    assert scores['3rd Stage'] >= scores['Avg.']
