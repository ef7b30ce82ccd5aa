"""``nfldm <stage> --config <path> --out <dir>`` entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from nfldm.config import ConfigError, PipelineConfig, load_config
from nfldm.nft import NFTFormatError
from nfldm.pipeline import STAGES, MissingArtifactError, StageOptions, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nfldm", description="Voxel-latent scene diffusion pipeline (toy scale).")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", help="JSON config; defaults are used when omitted")
    p.add_argument("--out", required=True, help="artifact directory shared by all stages")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--refine-steps", type=int, help="per-scene voxel refinement steps at voxel export")
    p.add_argument("--bev", help="BEV layout PNG for sample-bev")
    p.add_argument("--mask", help="top-down PNG for edit; white marks the region to resample")
    p.add_argument("--quiet", action="store_true")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.refine_steps is not None and args.refine_steps < 0:
            raise ConfigError("--refine-steps must be >= 0")
        opts = StageOptions(args.refine_steps, args.bev, args.mask)
        summary = run_stage(args.stage, cfg, args.out, opts)
    except ConfigError as exc:
        print(f"nfldm {args.stage}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, NFTFormatError) as exc:
        print(f"nfldm {args.stage}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    brief = {k: v for k, v in summary.items() if not isinstance(v, (list, dict))}
    print(json.dumps({"stage": args.stage, **brief}, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
