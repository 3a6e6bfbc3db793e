"""Main entry point for the poison frog lab."""

import argparse
import dataclasses
import json
import logging
import sys

from poison_lab.config import apply_smoke, default_config, load_config, schema
from poison_lab.errors import ConfigError, PoisonLabError

COMMAND_SCENARIOS = {
    'pretrain': 'end2end',
    'oneshot': 'transfer',
    'end2end': 'end2end',
    'outliers': 'outliers',
    'ablation': 'ablation',
    'craft': 'transfer',
    'project': 'transfer',
}

COMMAND_HELP = {
    'pretrain': 'Train the model profile on clean data and write the warm-start checkpoint',
    'oneshot': 'One-shot transfer-learning attacks (final layer retrained)',
    'end2end': 'End-to-end multi-poison sweep over poison counts and opacities',
    'outliers': 'Attacks on least-confident targets with a random-target control arm',
    'ablation': 'Leave-one-out ablation of base diversity, optimization and watermarking',
    'craft': 'Craft a single poison and save it as PNG and lossless blob',
    'project': 'Craft a single poison and write its 2-D feature-space scene as CSV',
}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per experiment."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file; flags below override its values')
    common.add_argument('--seed', type=int, help='Master seed for all trials')
    common.add_argument('--out', help='Output directory for reports, checkpoints and poisons')
    common.add_argument('--jobs', type=int, help='Worker threads for trials (default: logical cores)')
    common.add_argument('--profile', choices=['table1', 'tiny'], help='Model profile (default: tiny)')
    common.add_argument('--smoke', action='store_true', help='Reduced trial counts and iterations')
    common.add_argument('--checkpoint', help='Warm-start checkpoint path')
    common.add_argument('--trial', type=int, default=0, help='Trial whose seeds craft/project use')
    common.add_argument('--verbose', action='store_true', help='Log per-epoch losses')

    parser = argparse.ArgumentParser(description='Poison Frog Lab - clean-label poisoning experiments')
    parser.add_argument(
        '--print-schema',
        action='store_true',
        help='Print the configuration fields, types and defaults as JSON and exit'
    )
    commands = parser.add_subparsers(dest='command')
    for name, text in COMMAND_HELP.items():
        commands.add_parser(name, parents=[common], help=text, description=text)
    return parser


def resolve_config(args: argparse.Namespace):
    """Scenario defaults, then the config file, then command-line flags."""
    scenario = COMMAND_SCENARIOS[args.command]
    base = default_config(scenario, args.profile or 'tiny')
    cfg = load_config(args.config, base) if args.config else base
    overrides = {}
    if args.command not in ('pretrain', 'craft', 'project'):
        overrides['scenario'] = scenario
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.out is not None:
        overrides['out_dir'] = args.out
    if args.jobs is not None:
        overrides['jobs'] = args.jobs
    if args.checkpoint is not None:
        overrides['checkpoint'] = args.checkpoint
    if args.profile is not None and args.profile != cfg.profile:
        fresh = default_config(cfg.scenario, args.profile)
        overrides.update(profile=args.profile, dataset=fresh.dataset, pretrain=fresh.pretrain)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    if args.smoke:
        cfg = apply_smoke(cfg)
    return cfg


def run_command(command: str, cfg, trial: int):
    """Dispatch a subcommand and print its summary."""
    from analysis.experiment_tracker import ExperimentTracker
    from poison_lab import console, experiments

    if command == 'pretrain':
        console.print_pretrain(experiments.pretrain(cfg))
    elif command == 'craft':
        console.print_craft(experiments.craft_single(cfg, trial))
    elif command == 'project':
        console.print_craft(experiments.project_single(cfg, trial))
    else:
        runner = experiments.SCENARIO_RUNNERS[cfg.scenario]
        tracker = ExperimentTracker()
        reports = runner(cfg)
        console.print_campaign(f"{command} ({cfg.scenario})", cfg, reports, tracker)


def main(argv=None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.print_schema:
        print(json.dumps(schema(), indent=2))
        return 0
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        cfg = resolve_config(args)
        run_command(args.command, cfg, args.trial)
    except ConfigError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return 2
    except (PoisonLabError, OSError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
