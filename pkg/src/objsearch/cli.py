"""Command line: generate scenarios, run episodes, evaluate suites, replay
transcripts."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .harness import NOISE_PROFILES, evaluate, write_report
from .observation import CameraIntrinsics
from .reasoner import make_reasoner
from .scenarios import generate_scenario
from .supervisor import run_episode, save_transcript
from .world import CATEGORIES, load_scenario, save_scenario


def _cmd_gen(args) -> int:
    scenario = generate_scenario(args.category, args.seed)
    save_scenario(scenario, args.out)
    print(f"wrote {args.out} ({scenario.category}, "
          f"{len(scenario.initial_world.objects)} objects)")
    return 0


def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    reasoner = make_reasoner(args.reasoner)
    try:
        transcript = run_episode(
            scenario,
            reasoner,
            intr=CameraIntrinsics(),
            noise=NOISE_PROFILES[args.noise],
            ablation=args.ablation,
        )
    finally:
        reasoner.close()
    save_transcript(transcript, args.out)
    print(f"status={transcript.final_status} steps={len(transcript.records)} "
          f"reasoner_calls={transcript.reasoner_calls}", file=sys.stderr)
    print(f"wall_time={transcript.wall_time:.2f}s", file=sys.stderr)
    print(f"wrote {args.out}")
    return 0 if transcript.final_status == "success" else 1


def _cmd_eval(args) -> int:
    suite = []
    for name in sorted(os.listdir(args.suite)):
        if name.endswith(".json"):
            suite.append(load_scenario(os.path.join(args.suite, name)))
    if not suite:
        print("no scenarios found", file=sys.stderr)
        return 1
    report = evaluate(
        suite,
        args.reasoner,
        ablation=args.ablation,
        noise=args.noise,
        workers=args.workers,
    )
    paths = write_report(report, args.report)
    for cat, agg in report.per_category.items():
        print(f"{cat}: success={agg['success_rate']:.2f} "
              f"odr={agg['mean_final_odr']:.2f} "
              f"ged={agg['mean_ged']} steps={agg['mean_rollout_length']:.1f}")
    print("wrote " + ", ".join(paths))
    return 0


def _cmd_replay(args) -> int:
    with open(args.transcript, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    scn = data["scenario"]
    print(f"scenario {scn['name']} (category={scn['category']}, seed={scn['seed']})")
    for rec in data["steps"]:
        d = rec["decision"]
        o = rec["outcome"]
        print(
            f"[{rec['step']:03d}] instr={rec['instruction_index']} "
            f"dets={rec['n_detections']} odr={rec['odr']:.2f} "
            f"{d['action']}({d['target']}) -> "
            f"{'ok' if o.get('success') else o.get('reason')} | {d['goal_text']}"
        )
        diff = rec["graph_diff"]
        for key in ("nodes_added", "nodes_removed", "nodes_renamed"):
            if diff[key]:
                print(f"      {key}: {', '.join(diff[key])}")
        for key in ("edges_added", "edges_removed"):
            if diff[key]:
                shown = ["->".join(e[:2]) + f":{e[2]}" for e in diff[key]]
                print(f"      {key}: {', '.join(shown)}")
        if rec["newly_discovered"]:
            print(f"      discovered: {', '.join(rec['newly_discovered'])}")
    print(f"final: {data['final_status']} "
          f"(reasoner calls: {data['reasoner_calls']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="objsearch",
        description="tabletop object-search simulator and agent harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a scenario file")
    p.add_argument("--category", required=True, choices=CATEGORIES)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("run", help="run one episode")
    p.add_argument("--scenario", required=True)
    p.add_argument("--reasoner", default="heuristic",
                   help="heuristic | oracle | external:CMD")
    p.add_argument("--ablation", default=None,
                   choices=["fixed_camera", "three_fixed_cameras",
                            "generative_pose", "no_memory"])
    p.add_argument("--noise", default="zero", choices=sorted(NOISE_PROFILES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="evaluate a directory of scenarios")
    p.add_argument("--suite", required=True)
    p.add_argument("--reasoner", default="heuristic")
    p.add_argument("--ablation", default=None,
                   choices=["fixed_camera", "three_fixed_cameras",
                            "generative_pose", "no_memory"])
    p.add_argument("--noise", default="zero", choices=sorted(NOISE_PROFILES))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("replay", help="print a transcript step log")
    p.add_argument("--transcript", required=True)
    p.set_defaults(func=_cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
