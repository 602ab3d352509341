import csv
import itertools
import json
import os
import shutil

import numpy as np
import pytest

import training
from config import build_run_config
from decoder import DecodedAnswer, decode_step, greedy_decode, init_params
from metrics import normalize_answer
from model import Hierarchy
from neural import NumericError, Tensor, no_grad
from scene import QAExample, SynthSpec
from storage import load_split, write_synthetic_dataset
from training import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    METRICS_COLUMNS,
    METRICS_FILE,
    _context,
    batch_indices,
    build_vocabs,
    collect_examples,
    evaluate_examples,
    example_loss,
    feature_dim,
    pg_loss,
    predict,
    prediction_records,
    read_checkpoint,
    train,
    training_answer,
)

from conftest import D_IN


def examples_for(scene, cfg):
    return collect_examples([("shop", scene)], cfg)


def setup(scene, cfg, seed=0):
    examples = examples_for(scene, cfg)
    vocabs = build_vocabs(examples)
    params = init_params(cfg.model(), D_IN, len(vocabs.question), len(vocabs.answer), seed)
    return examples, vocabs, params


def test_collect_examples_shares_scene_graph(tiny_scene, tiny_config):
    scene = tiny_scene.model_copy(update={"examples": tiny_scene.examples * 2})
    examples = examples_for(scene, tiny_config)
    assert [ex.example_id for ex in examples] == ["shop#0", "shop#1"]
    assert examples[0].graph is examples[1].graph
    assert examples[0].question_text == "what does the sign say"
    assert feature_dim(examples) == D_IN


def test_vocabularies_from_training_examples(tiny_scene, tiny_config):
    vocabs = build_vocabs(examples_for(tiny_scene, tiny_config))
    assert vocabs.question.words[4:] == ["does", "say", "sign", "the", "what"]
    # "stop" is on a token, so only the copy scores may produce it
    assert vocabs.answer.words[4:] == []


def test_answer_vocabulary_keeps_words_no_token_carries(tiny_scene, tiny_config):
    scene = tiny_scene.model_copy(
        update={
            "examples": [
                *tiny_scene.examples,
                QAExample(question=["is", "it", "open"], answers=["yes", "yes", "no"]),
                QAExample(question=["what", "color"], answers=["red taxi"]),
            ]
        }
    )
    examples = examples_for(scene, tiny_config)
    assert build_vocabs(examples).answer.words[4:] == ["red", "yes"]
    assert build_vocabs(examples, answer_min_count=2).answer.words[4:] == []


def test_training_answer_majority_then_first():
    assert training_answer(["Exit", "stop", "stop"]) == "stop"
    assert training_answer(["exit", "stop"]) == "exit"


def test_batch_schedule_is_a_pure_function_of_step():
    n, bs = 5, 2
    first_epoch = [i for step in range(2) for i in batch_indices(n, bs, step, seed=3)] + batch_indices(n, bs, 2, 3)[:1]
    assert sorted(first_epoch) == list(range(n))
    cache = {}
    assert [batch_indices(n, bs, s, 3, cache) for s in range(6)] == [batch_indices(n, bs, s, 3) for s in range(6)]
    assert batch_indices(n, bs, 0, 3) != batch_indices(n, bs, 0, 4) or batch_indices(n, bs, 1, 3) != batch_indices(n, bs, 1, 4)


def test_pg_loss_scales_softplus_by_reward():
    s1, s2 = Tensor(np.array(1.5), requires_grad=True), Tensor(np.array(-0.5), requires_grad=True)
    decoded = DecodedAnswer(steps=[], text="cafe", stopped_at=2, selected=[s1, s2])
    loss = pg_loss(decoded, ["cafes", "bar"])
    expected = 0.8 * (np.logaddexp(0, -1.5) + np.logaddexp(0, 0.5)) / 2
    assert loss.item() == pytest.approx(expected)
    loss.backward()
    assert s1.grad == pytest.approx(-0.8 * 0.5 / (1 + np.exp(1.5)))
    assert pg_loss(decoded, ["xyz"]).item() == 0.0


def test_example_loss_without_policy_gradient(tiny_scene, tiny_config):
    examples, vocabs, params = setup(tiny_scene, tiny_config)
    total, parts = example_loss(params, examples[0], vocabs, tiny_config.model(), lam=0.0)
    assert parts.pg == 0.0
    assert parts.total == parts.bce == total.item()
    assert parts.bce > 0


def test_example_loss_reports_non_finite_values(tiny_scene, tiny_config):
    examples, vocabs, params = setup(tiny_scene, tiny_config)
    params["dec.vocab_out.b"].data[:] = np.nan
    with pytest.raises(NumericError, match="shop#0"):
        example_loss(params, examples[0], vocabs, tiny_config.model(), lam=0.0)


def _min_margin(params, ex, vocabs, cfg):
    with no_grad():
        decoded = greedy_decode(_context(params, ex, vocabs, cfg), ex.scene, params, cfg, vocabs.answer)
    # top-2 gap of every greedy step
    gaps = []
    with no_grad():
        ctx = _context(params, ex, vocabs, cfg)
        chosen = [(s.source, s.index) for s in decoded.steps]
        for step in range(1, len(chosen) + 1):
            y_o, y_t = decode_step(ctx, params, cfg, vocabs.answer, chosen, step)
            scores = np.sort(np.concatenate([y_o.data.ravel(), y_t.data.ravel()]))
            gaps.append(scores[-1] - scores[-2])
    return min(gaps)


def test_full_loss_gradients(tiny_scene, tiny_config, gradcheck):
    cfg = tiny_config.model()
    examples = examples_for(tiny_scene, tiny_config)
    vocabs = build_vocabs(examples)
    for seed in range(20):
        params = init_params(cfg, D_IN, len(vocabs.question), len(vocabs.answer), seed)
        if _min_margin(params, examples[0], vocabs, cfg) > 1e-3:
            break
    else:
        pytest.fail("no initialisation with a clear greedy decode")

    names = ["enc.word", "enc.tok_box.w", "tv.mp.att.w", "tt.gin.msg.w", "dec.block0.ff1.w", "dec.token_query.w"]
    gradcheck(
        lambda: example_loss(params, examples[0], vocabs, cfg, lam=1.0)[0],
        {n: params[n] for n in names},
        eps=1e-6,
        samples=3,
    )


def test_train_writes_run_directory(dataset, tiny_config):
    result = train(tiny_config)
    out = tiny_config.out_dir
    assert result.final_step == 3
    assert os.path.exists(os.path.join(out, LAST_CHECKPOINT))
    assert os.path.exists(os.path.join(out, BEST_CHECKPOINT))
    assert os.path.exists(os.path.join(out, "config.env"))
    with open(os.path.join(out, METRICS_FILE), newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == METRICS_COLUMNS
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    # validation runs on eval_every multiples and on the final step
    assert rows[1][5] == "" and rows[2][5] != "" and rows[3][5] != ""
    assert all(np.isfinite(float(r[4])) for r in rows[1:])
    assert result.best_val_acc is not None

    loaded = read_checkpoint(result.last_checkpoint)
    assert loaded.state.step == 3
    assert loaded.config == tiny_config
    assert loaded.metadata["d_in"] == D_IN


def test_resume_matches_uninterrupted_run(dataset, tiny_config, tmp_path):
    straight = tiny_config.model_copy(update={"out_dir": str(tmp_path / "straight")})
    full = train(straight)

    first = tiny_config.model_copy(update={"out_dir": str(tmp_path / "split"), "steps": 2})
    half = train(first)
    resumed = train(first.model_copy(update={"steps": 3}), resume=half.last_checkpoint)

    a, b = read_checkpoint(full.last_checkpoint), read_checkpoint(resumed.last_checkpoint)
    assert b.state.step == 3
    for name, p in a.params.items():
        assert np.array_equal(p.data, b.params[name].data), name
        assert np.array_equal(a.state.m[name], b.state.m[name])
    assert resumed.losses == full.losses[2:]
    with open(os.path.join(first.out_dir, METRICS_FILE), encoding="utf-8") as f:
        assert len(f.read().splitlines()) == 4


def test_evaluation_report_and_prediction_lines(dataset, tiny_config):
    result = train(tiny_config)
    loaded = read_checkpoint(result.best_checkpoint)
    examples = collect_examples(load_split(dataset, "val"), loaded.config)
    report = evaluate_examples(
        loaded.params, examples, loaded.vocabs, loaded.config.model(), split="val", sparsity={"tsg": 0.5}
    )
    assert report.count == len(examples) == 3
    assert 0.0 <= report.acc <= 1.0 and 0.0 <= report.anls <= 1.0
    lines = [json.loads(line) for line in prediction_records(report)]
    assert [line["id"] for line in lines] == [ex.example_id for ex in examples]
    assert set(lines[0]) == {"id", "question", "prediction", "sources", "golds"}
    assert all(s["source"] in ("vocab", "token") for s in lines[0]["sources"])



def _metrics_text(out_dir):
    with open(os.path.join(out_dir, METRICS_FILE), encoding="utf-8") as f:
        return f.read()


def test_interrupted_run_resumes_from_last_checkpoint(dataset, tiny_config, tmp_path, monkeypatch):
    straight = tiny_config.model_copy(update={"out_dir": str(tmp_path / "straight"), "steps": 5})
    full = train(straight)

    crashed = straight.model_copy(update={"out_dir": str(tmp_path / "crashed")})
    evaluate = training.evaluate_examples
    calls = []

    def fails_on_second_eval(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise RuntimeError("interrupted")
        return evaluate(*args, **kwargs)

    monkeypatch.setattr(training, "evaluate_examples", fails_on_second_eval)
    with pytest.raises(RuntimeError, match="interrupted"):
        train(crashed)
    monkeypatch.undo()

    last = os.path.join(crashed.out_dir, LAST_CHECKPOINT)
    # the step 2 checkpoint survives; step 3 was logged after it
    assert read_checkpoint(last).state.step == 2
    assert [line.split(",")[0] for line in _metrics_text(crashed.out_dir).splitlines()[1:]] == ["1", "2", "3"]

    resumed = train(crashed, resume=last)
    assert resumed.losses == full.losses[2:]
    assert _metrics_text(crashed.out_dir) == _metrics_text(straight.out_dir)


def test_resume_from_an_older_checkpoint_drops_later_rows(dataset, tiny_config, tmp_path, caplog):
    straight = train(tiny_config.model_copy(update={"out_dir": str(tmp_path / "straight"), "steps": 5}))

    cfg = tiny_config.model_copy(update={"out_dir": str(tmp_path / "run"), "steps": 2})
    early = str(tmp_path / "step2.ckpt")
    shutil.copy(train(cfg).last_checkpoint, early)
    later = cfg.model_copy(update={"steps": 5})
    train(later, resume=early)

    caplog.set_level("INFO", logger="training")
    train(later, resume=early)
    assert "dropping 3 metrics rows past step 2" in caplog.text
    rows = _metrics_text(cfg.out_dir).splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "2", "3", "4", "5"]
    assert _metrics_text(cfg.out_dir) == _metrics_text(straight.out_dir)


@pytest.mark.slow
@pytest.mark.parametrize("hierarchy", list(Hierarchy))
@pytest.mark.parametrize("sparsify", list(itertools.product([True, False], repeat=3)))
def test_every_variant_trains(dataset, tiny_config, hierarchy, sparsify):
    cfg = tiny_config.model_copy(
        update={
            "hierarchy": hierarchy,
            "sparsify_otsg": sparsify[0],
            "sparsify_osg": sparsify[1],
            "sparsify_tsg": sparsify[2],
            "steps": 4,
        }
    )
    result = train(cfg)
    assert result.final_step == 4
    assert all(np.isfinite(loss) for loss in result.losses)


@pytest.mark.slow
@pytest.mark.parametrize("hierarchy", list(Hierarchy))
@pytest.mark.parametrize("use", list(itertools.product([True, False], repeat=3)))
def test_every_graph_subset_trains(dataset, tiny_config, hierarchy, use):
    cfg = tiny_config.model_copy(
        update={"hierarchy": hierarchy, "use_otsg": use[0], "use_osg": use[1], "use_tsg": use[2], "steps": 4}
    )
    result = train(cfg)
    assert result.final_step == 4
    assert all(np.isfinite(loss) for loss in result.losses)


def exact_match(params, examples, vocabs, cfg):
    decoded = predict(params, examples, vocabs, cfg)
    hits = [normalize_answer(decoded[ex.example_id].text) == training_answer(ex.golds) for ex in examples]
    return sum(hits) / len(hits)


def copy_task_config(tmp_path, scenes, splits, **overrides):
    data = tmp_path / "data"
    write_synthetic_dataset(data, 0, SynthSpec(scenes=scenes, splits=splits))
    values = {"data_dir": str(data), "out_dir": str(tmp_path / "run"), "max_answer_len": "4"}
    values.update({k: str(v) for k, v in overrides.items()})
    return build_run_config(values, seed=0)


@pytest.mark.slow
def test_small_set_overfits(tmp_path):
    cfg = copy_task_config(tmp_path, 10, {"train": 1.0, "val": 0.0, "test": 0.0}, steps=300, eval_every=300)
    result = train(cfg)
    assert result.losses[199] < result.losses[0]

    loaded = read_checkpoint(result.last_checkpoint)
    examples = collect_examples(load_split(cfg.data_dir, "train"), loaded.config)
    assert len(examples) == 10
    report = evaluate_examples(loaded.params, examples, loaded.vocabs, loaded.config.model(), split="train")
    assert report.acc >= 0.8


@pytest.mark.slow
def test_desk_preset_learns_to_copy(tmp_path):
    cfg = copy_task_config(tmp_path, 250, {"train": 0.8, "val": 0.2, "test": 0.0}, eval_every=500)
    assert cfg.steps == 2000
    result = train(cfg)

    early, late = np.mean(result.losses[:100]), np.mean(result.losses[-100:])
    assert late < early

    loaded = read_checkpoint(result.last_checkpoint)
    assert loaded.vocabs.answer.words[4:] == []
    train_ex = collect_examples(load_split(cfg.data_dir, "train"), loaded.config)
    val_ex = collect_examples(load_split(cfg.data_dir, "val"), loaded.config)
    assert (len(train_ex), len(val_ex)) == (200, 50)
    assert exact_match(loaded.params, val_ex, loaded.vocabs, loaded.config.model()) >= 0.8
