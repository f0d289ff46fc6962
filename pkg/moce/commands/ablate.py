import argparse

from ..schemas.config import RunConfig
from ..services.ablation_service import AblationService


def register(subparsers) -> None:
    parser = subparsers.add_parser("ablate", help="Routing-strategy grid and expert-count scaling")
    parser.add_argument("--config", required=True, help="Base run configuration")
    parser.add_argument("--seeds", type=int, nargs="+", default=None)
    parser.add_argument("--sweep", type=int, nargs="+", default=None, help="Also run fixed cluster counts")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    service = AblationService(RunConfig.from_file(args.config))
    rows = service.run(args.seeds)
    print(f"rows={len(rows)}")
    if args.sweep:
        sweep_rows, elbow_k = service.cluster_sweep(args.sweep, args.seeds)
        print(f"sweep_rows={len(sweep_rows)} elbow_k={elbow_k}")
    return 0
