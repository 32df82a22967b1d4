"""Command-line entry point: ``catdrive <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .agents import make_agent, run_agent, save_policy
from .evaluation import attack_success_rate, eval_policy, record_episode, render_episode
from .forge import TEMPLATES, ForgeConfig, forge_scenario, write_corpus
from .pipeline import MODES, CatConfig, Trainer, load_pool
from .predictor import PredictorConfig, candidates_to_dict, generate_candidates
from .resampler import EgoRolloutBuffer, generate_adversarial
from .scenario import (
    ScenarioError,
    adversarial_to_dict,
    identity_adversary,
    load_adversarial_or_raw,
    load_scenario,
    save_scenario,
    slice_history,
)

def _write_json(doc, path):
    text = json.dumps(doc, indent=2)
    if path in (None, "-"):
        sys.stdout.write(text + "\n")
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n", encoding="utf-8")


def cmd_forge(args):
    if args.corpus:
        manifest = write_corpus(args.out, args.n, args.split, args.seed)
        print(f"wrote {len(manifest['train'])} train / {len(manifest['test'])} test scenarios to {args.out}")
        return
    if not args.template:
        raise SystemExit("forge needs --template (or use `forge corpus`)")
    s = forge_scenario(ForgeConfig(args.template, args.seed, args.background))
    out = Path(args.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{args.template}_{args.seed}.json"
    save_scenario(s, out)
    print(out)


def cmd_predict(args):
    s = load_scenario(args.scenario)
    vid = args.vehicle or s.adversary_id
    cs = generate_candidates(slice_history(s), vid, args.m, PredictorConfig(m=args.m, seed=args.seed))
    _write_json(candidates_to_dict(cs), args.out)


def _scene_name(path):
    return Path(path).stem


def _scenes_from(path, split=None):
    p = Path(path)
    if p.is_dir():
        return load_pool(p, split)
    return [(_scene_name(p), load_scenario(p))]


def cmd_attack(args):
    s = load_scenario(args.scenario)
    agent = make_agent(args.agent)
    buf = EgoRolloutBuffer(args.n)
    for _ in range(args.n):
        r = run_agent(agent, identity_adversary(s))[0]
        buf.append(r.trajectory, r.log_prob_sum)
    g = generate_adversarial(s, buf, args.alpha, PredictorConfig(m=args.m, seed=args.seed))
    doc = adversarial_to_dict(g.adversarial)
    doc["report"] = {
        "version": 1,
        "selected": g.selected,
        "fallback": g.fallback,
        "generation_time_ms": g.elapsed_ms,
        "candidates": [
            {"index": sc.index, "prior": sc.prior, "earliest_step": list(sc.steps), "posterior": sc.posterior}
            for sc in g.scores
        ],
    }
    _write_json(doc, args.out)


def cmd_rollout(args):
    adv = load_adversarial_or_raw(args.scenario)
    trace = record_episode(make_agent(args.agent), adv)
    _write_json(trace, args.record)
    print(json.dumps(trace["result"]))


def cmd_train(args):
    scenes = load_pool(args.pool, "train")
    cfg = CatConfig(mode=args.mode, generations=args.steps, seed=args.seed, m=args.m, n=args.n,
                    alpha=args.alpha, scenes_per_generation=args.scenes_per_generation,
                    population=args.population)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer.resume(args.resume, scenes) if args.resume else Trainer(cfg, scenes)
    trainer.run(args.steps, out, args.checkpoint_every)
    save_policy(trainer.state.params, out / "policy.json")
    print(f"trained {trainer.state.generation} generations; policy at {out / 'policy.json'}")


def cmd_eval_attack(args):
    scenes = _scenes_from(args.scenes, args.split)
    report = attack_success_rate(make_agent(args.agent), scenes, args.n, args.generator, args.alpha, args.m,
                                 args.seed)
    _write_json(report, args.out)
    print(f"attack success rate {report['success_rate']:.3f} over {len(scenes)} scenes")


def cmd_eval_policy(args):
    scenes = _scenes_from(args.scenes, args.split)
    seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
    agent = make_agent(f"policy:{args.ckpt}" if not args.ckpt.startswith(("policy:", "idm", "replay", "stop"))
                       else args.ckpt)
    report = eval_policy(agent, scenes, args.mode, seeds, args.alpha, args.m)
    _write_json(report, args.out)
    print(f"route completion {report['route_completion']['mean']:.3f}, "
          f"crash rate {report['crash_rate']['mean']:.3f}")


def cmd_render(args):
    trace = json.loads(Path(args.trace).read_text(encoding="utf-8"))
    render_episode(trace, args.out)
    print(args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="catdrive", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forge", help="generate synthetic scenarios")
    f.add_argument("corpus", nargs="?", choices=["corpus"], help="generate a split corpus instead of one scene")
    f.add_argument("--template", choices=TEMPLATES)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--background", type=int, default=2, help="background vehicles (single scene)")
    f.add_argument("--n", type=int, default=500)
    f.add_argument("--split", type=float, default=0.8, help="train fraction")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_forge)

    pr = sub.add_parser("predict", help="write trajectory candidates for one vehicle")
    pr.add_argument("--scenario", required=True)
    pr.add_argument("--vehicle")
    pr.add_argument("--m", type=int, default=32)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("attack", help="generate an adversarial scenario against an agent")
    a.add_argument("--scenario", required=True)
    a.add_argument("--agent", default="replay")
    a.add_argument("--alpha", type=float, default=0.99)
    a.add_argument("--m", type=int, default=32)
    a.add_argument("--n", type=int, default=1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("rollout", help="run one episode and record its trace")
    r.add_argument("--scenario", required=True, help="raw or adversarial scenario file")
    r.add_argument("--agent", default="idm")
    r.add_argument("--record")
    r.set_defaults(func=cmd_rollout)

    t = sub.add_parser("train", help="train a policy with one of the pipelines")
    t.add_argument("--mode", choices=MODES, default="closed_loop")
    t.add_argument("--pool", required=True)
    t.add_argument("--steps", type=int, default=100, help="optimizer generations")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--m", type=int, default=32)
    t.add_argument("--n", type=int, default=5)
    t.add_argument("--alpha", type=float, default=0.99)
    t.add_argument("--population", type=int, default=32)
    t.add_argument("--scenes-per-generation", type=int, default=4)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--resume")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    ea = sub.add_parser("eval-attack", help="attack success rate against a fixed agent")
    ea.add_argument("--agent", default="replay")
    ea.add_argument("--scenes", required=True)
    ea.add_argument("--split", default="test")
    ea.add_argument("--n", type=int, default=1)
    ea.add_argument("--generator", choices=["resample", "none", "prior_only"], default="resample")
    ea.add_argument("--alpha", type=float, default=0.99)
    ea.add_argument("--m", type=int, default=32)
    ea.add_argument("--seed", type=int, default=0)
    ea.add_argument("--out")
    ea.set_defaults(func=cmd_eval_attack)

    ep = sub.add_parser("eval-policy", help="route completion and crash rate of a policy")
    ep.add_argument("--ckpt", required=True, help="policy checkpoint (or an agent name)")
    ep.add_argument("--scenes", required=True)
    ep.add_argument("--split", default="test")
    ep.add_argument("--mode", choices=["log_replay", "safety_critical"], default="log_replay")
    ep.add_argument("--seeds", default="0")
    ep.add_argument("--alpha", type=float, default=0.99)
    ep.add_argument("--m", type=int, default=32)
    ep.add_argument("--out")
    ep.set_defaults(func=cmd_eval_policy)

    rd = sub.add_parser("render", help="render a recorded trace to SVG")
    rd.add_argument("--trace", required=True)
    rd.add_argument("--out", required=True)
    rd.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ScenarioError, ValueError, FileNotFoundError) as err:
        print(f"catdrive: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
