import json
import sys
from fractions import Fraction

import pytest
from sklearn.base import clone

from fcurate.endpoints import MockEndpoint, MockScript
from fcurate.hdr_loop import (
    CandidateResponse,
    CheckpointError,
    CommandFineTune,
    DeskFineTune,
    HDRLoop,
    JudgeVerdictSet,
    LoopConfig,
    accept,
    extract_score,
    load_checkpoint,
    run_loop,
    score_candidate,
)

import loopkit


def test_defaults():
    cfg = LoopConfig()
    assert (cfg.t_max, cfg.tau, cfg.n_gen, cfg.temperature, cfg.acceptance) == (10, 0.5, 3, 0.7, "unanimous")


@pytest.mark.parametrize("kw", [{"t_max": 0}, {"tau": 0}, {"tau": 1.5}, {"n_gen": 0}, {"acceptance": "most"},
                                {"k": 0}, {"parallelism": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        LoopConfig(**kw)


def test_config_hash_ignores_parallelism():
    assert LoopConfig(parallelism=1).config_hash() == LoopConfig(parallelism=16).config_hash()
    assert LoopConfig(seed=1).config_hash() != LoopConfig(seed=2).config_hash()


@pytest.mark.parametrize("reply,score", [
    ("0.8", 0.8), ("Score: 1", 1.0), ("<think>maybe 0.1</think> 0.9", 0.9), (".5", 0.5),
    ("1.5", None), ("-0.2", None), ("none", None), ("", None),
])
def test_extract_score(reply, score):
    assert extract_score(reply) == score


def test_verdict_set_score_exact():
    v = JudgeVerdictSet([0.5, 0.49, None], 0.5)
    assert v.pass_bits == [1, 0, 0]
    assert v.score == Fraction(1, 3)


def test_score_candidate_handles_bad_judges():
    good = MockEndpoint.constant_judge(True, 0.9)
    malformed = MockEndpoint(MockScript(default="dunno"))
    down = MockEndpoint(MockScript(default="1.0", failures={"*": ["4xx"]}))
    cand = CandidateResponse("a", 0, "[f()]")
    v = score_candidate(cand, [good, malformed, down], LoopConfig())
    assert v.raw_scores == [0.9, None, None]
    assert [e["code"] for e in v.evidence] == ["MALFORMED_SCORE", "JUDGE_UNAVAILABLE"]
    assert malformed.attempts == 3


def test_accept_tie_break_and_demotion():
    cfg = LoopConfig()
    ok = JudgeVerdictSet([1.0], 0.5)
    from fcurate.fcall import parse_strict
    c0 = CandidateResponse("a", 0, "junk", None)
    c1 = CandidateResponse("a", 1, "[f()]", parse_strict("[f()]"))
    c2 = CandidateResponse("a", 2, "[g()]", parse_strict("[g()]"))
    evidence = []
    chosen = accept([(c2, ok), (c1, ok), (c0, ok)], cfg, evidence)
    assert chosen[0] is c1
    assert evidence[0]["code"] == "DEMOTED_UNPARSEABLE"


def test_converges_in_one_iteration(tmp_path):
    hard = loopkit.hard_set(5)
    state = run_loop(hard, loopkit.generator(), loopkit.constant_judges(3, 1.0), LoopConfig(seed=1),
                     DeskFineTune(), tmp_path)
    assert state.t == 1 and state.termination == "converged" and state.hard_ids == ()
    assert sorted(state.accepted_ids) == [s.id for s in hard]
    assert all(r["attempt"] == 0 for r in state.dnew[0])
    cp = json.loads((tmp_path / "checkpoint.json").read_text())
    assert cp["termination"] == "converged" and cp["dnew_manifest_paths"] == ["dnew_t000.jsonl"]


def test_all_reject_runs_t_max():
    ft = DeskFineTune()
    hard = loopkit.hard_set(4)
    state = run_loop(hard, loopkit.generator(), loopkit.constant_judges(3, 0.0), LoopConfig(), ft)
    assert state.t == 10 and state.termination == "max_iterations"
    assert state.hard_ids == tuple(s.id for s in hard)
    assert ft.requests == []  # nothing accepted, so the hook never fires
    assert state.model_tag == "M0"


def test_empty_hard_set():
    state = run_loop([], loopkit.generator(), loopkit.constant_judges(1, 1.0))
    assert state.t == 0 and state.termination == "converged"


def test_judge_count_mismatch():
    with pytest.raises(ValueError):
        run_loop(loopkit.hard_set(1), loopkit.generator(), loopkit.constant_judges(2, 1.0), LoopConfig(k=3))


def test_finetune_tag_threads_through():
    ft = DeskFineTune()
    state = run_loop(loopkit.hard_set(6), loopkit.generator(), loopkit.judges(3, 0.6, salt=4),
                     LoopConfig(acceptance="majority"), ft)
    tags = [e["model_tag"] for e in state.report]
    assert len(ft.requests) == sum(1 for e in state.report if e["accepted"])
    for (it, tag_in, n), entry in zip(ft.requests, [e for e in state.report if e["accepted"]]):
        assert n == entry["accepted"]
    assert tags[-1] == state.model_tag


def test_majority_vs_unanimous():
    hard = loopkit.hard_set(20)
    js = loopkit.judges(3, 0.6, salt=9)
    maj = run_loop(hard, loopkit.generator(), js, LoopConfig(acceptance="majority", t_max=1))
    una = run_loop(hard, loopkit.generator(), js, LoopConfig(acceptance="unanimous", t_max=1))
    assert set(una.accepted_ids) <= set(maj.accepted_ids)


def test_resume_matches_uninterrupted(tmp_path):
    hard = loopkit.hard_set(12)
    cfg = LoopConfig(seed=3, acceptance="majority")
    full = run_loop(hard, loopkit.generator(), loopkit.judges(3, 0.3, salt=1), cfg, DeskFineTune(),
                    tmp_path / "full")
    short = run_loop(hard, loopkit.generator(), loopkit.judges(3, 0.3, salt=1), LoopConfig(seed=3, t_max=2,
                     acceptance="majority"), DeskFineTune(), tmp_path / "part")
    assert short.t == 2
    # continue the interrupted run under the full config: rewrite hash as if t_max had always been 10
    cp_path = tmp_path / "part" / "checkpoint.json"
    cp = json.loads(cp_path.read_text())
    cp["config_hash"], cp["termination"] = cfg.config_hash(), "running"
    cp_path.write_text(json.dumps(cp))
    resumed = run_loop(hard, loopkit.generator(), loopkit.judges(3, 0.3, salt=1), cfg, DeskFineTune(),
                       tmp_path / "part", resume=True)
    assert resumed.t == full.t and resumed.hard_ids == full.hard_ids
    assert resumed.dnew == full.dnew
    for name in full.dnew_paths:
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_resume_rejects_other_config(tmp_path):
    run_loop(loopkit.hard_set(2), loopkit.generator(), loopkit.constant_judges(1, 0.0), LoopConfig(t_max=1),
             None, tmp_path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path, LoopConfig(t_max=2))


def test_generator_failures_are_missing_attempts():
    gen = MockEndpoint(MockScript(default='[lookup(key="x")]', failures={"h000:generator": ["4xx"]}))
    state = run_loop(loopkit.hard_set(2), gen, loopkit.constant_judges(1, 1.0), LoopConfig(t_max=1))
    assert state.report[0]["missing_attempts"] == 1
    assert state.termination == "converged"


def test_command_finetune(tmp_path):
    script = tmp_path / "train.py"
    script.write_text("import sys\nn = sum(1 for _ in open(sys.argv[-1]))\nprint('log line')\nprint(f'model-{n}')\n")
    ft = CommandFineTune([sys.executable, str(script)])
    assert ft.fine_tune([{"id": "a"}, {"id": "b"}], "M0", 0) == "model-2"


def test_estimator(tmp_path):
    hard = loopkit.hard_set(4)
    est = HDRLoop(generator=loopkit.generator(), judges=loopkit.constant_judges(2, 1.0), t_max=3)
    assert est.get_params()["t_max"] == 3
    assert clone(est).get_params()["n_gen"] == 3
    est.fit(hard)
    assert est.predict(hard + loopkit.hard_set(1, prefix="z")) == [0, 0, 0, 0, -1]
    assert len(est.dnew_) == 4 and est.report_[0]["accepted"] == 4


def test_parallelism_does_not_change_outputs(tmp_path):
    hard = loopkit.hard_set(10)
    outs = []
    for workers in (1, 8):
        d = tmp_path / f"w{workers}"
        run_loop(hard, loopkit.generator(0.2, 3), loopkit.judges(3, 0.5, 3, 0.1),
                 LoopConfig(acceptance="majority", parallelism=workers), DeskFineTune(), d)
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1]
