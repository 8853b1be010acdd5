"""Command-line front end.

Every command takes a manifest and an optional output directory and runs one
pipeline stage.  Exit codes: 0 success, 1 configuration problem (bad manifest,
bad field), 2 runtime failure (missing upstream artifact, training blow-up).
"""
import argparse
import json
import os
import sys
import traceback

from .checkpoint import CheckpointError
from .codec import CodecError
from .manifest import ManifestError, load_manifest, manifest_to_dict
from .pipelines import PipelineError, run_stage

COMMANDS = ("train-teacher", "train-codec", "distill", "finetune",
            "ablate", "eval", "report")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fewstep",
        description="few-step diffusion distillation on toy domains")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} stage")
        sp.add_argument("--manifest", required=True,
                        help="path to the run manifest (JSON)")
        sp.add_argument("--out", default=None,
                        help="run directory (default: the manifest's out_dir, "
                             "under $FEWSTEP_OUT when that is set)")
        sp.add_argument("--seed-override", type=int, default=None,
                        help="replace the manifest seed for this invocation")
        sp.add_argument("--dry-run", action="store_true",
                        help="print the fully resolved manifest and exit")
        sp.add_argument("--threads", type=int, default=1,
                        help="parallel child runs (ablate only)")
    return parser


def resolve_out(args, man):
    if args.out:
        return args.out
    root = os.environ.get("FEWSTEP_OUT")
    return os.path.join(root, man.out_dir) if root else man.out_dir


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        man = load_manifest(args.manifest)
        if args.seed_override is not None:
            man.seed = args.seed_override
        if args.dry_run:
            print(json.dumps(manifest_to_dict(man), indent=2, sort_keys=True))
            return 0
        out = resolve_out(args, man)
        result = run_stage(args.command, man, out, threads=max(1, args.threads))
        print(f"{args.command}: ok {json.dumps(result, default=str)}")
        return 0
    except ManifestError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (PipelineError, CheckpointError, CodecError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
