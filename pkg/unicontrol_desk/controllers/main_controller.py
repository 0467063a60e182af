"""
Main Controller - Command-line dispatch
Parses argv, wires models to views and maps package errors to exit codes.
Follows the Controller component of MVC architecture
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO

import numpy as np

from unicontrol_desk import __version__
from unicontrol_desk.models.checkpoint import load_checkpoint, save_checkpoint
from unicontrol_desk.models.checks import run_gradcheck_suite
from unicontrol_desk.models.config import Config
from unicontrol_desk.models.control import init_unicontrol
from unicontrol_desk.models.datagen import (
    ZERO_SHOT_TRANSFORMS,
    load_dataset,
    write_dataset,
    zero_shot_condition,
)
from unicontrol_desk.models.diffusion import GuidanceConfig, sample_images
from unicontrol_desk.models.errors import ConfigError, DatasetError, UniControlError
from unicontrol_desk.models.evaluation import eval_condition_fidelity
from unicontrol_desk.models.records import SampleRecord, load_tensor
from unicontrol_desk.models.tasks import (
    DEFAULT_REGISTRY,
    ZERO_SHOT_PRESETS,
    Conditioning,
    compose_hybrid,
    encode_text,
    estimate_task_weights,
)
from unicontrol_desk.models.trainer import (
    base_from_checkpoint,
    count_params,
    model_from_checkpoint,
    pretrain,
    train,
)
from unicontrol_desk.views.image_view import load_ppm, save_images
from unicontrol_desk.views.report_view import format_fidelity, format_gradcheck, format_param_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_ERROR = 2
DEFAULT_INSTRUCTION = "unseen condition to image"


def _parse_weights(text: str) -> Dict[str, float]:
    """"depth=0.6,seg=0.3" -> {"depth": 0.6, "seg": 0.3}."""
    weights: Dict[str, float] = {}
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        try:
            weights[key.strip()] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad weight {value!r} for {key!r}") from None
    return weights


def _task_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def read_image_file(path: str) -> np.ndarray:
    """
    Load a (3, S, S) array from a dataset record, pixmap or raw tensor.

    Records yield their condition map; pixmaps are scaled to [0, 1].
    """
    source = Path(path)
    if source.suffix == ".ucds":
        try:
            return SampleRecord.from_bytes(source.read_bytes()).condition
        except OSError as exc:
            raise DatasetError(f"cannot read record ({exc.strerror})", source) from exc
    if source.suffix == ".ppm":
        return (load_ppm(source).astype(np.float32) / 255.0).transpose(2, 0, 1)
    return load_tensor(source)


def read_record_image(path: str) -> np.ndarray:
    """Clean image in [-1, 1] from a record, or a raw tensor taken as such."""
    source = Path(path)
    if source.suffix == ".ucds":
        try:
            return SampleRecord.from_bytes(source.read_bytes()).image
        except OSError as exc:
            raise DatasetError(f"cannot read record ({exc.strerror})", source) from exc
    return read_image_file(path)


class MainController:
    """
    Command-line application controller.

    Each subcommand has one ``_cmd_*`` handler returning an exit status;
    reports go to ``out`` so tests can capture them.
    """

    def __init__(self, out: Optional[TextIO] = None) -> None:
        self.out = out if out is not None else sys.stdout
        self.parser = self._build_parser()

    # -- parser --------------------------------------------------------

    def _build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog="unicontrol-desk",
            description="Desk-scale unified controllable diffusion",
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )
        parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
        verbosity = parser.add_mutually_exclusive_group()
        verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
        sub = parser.add_subparsers(dest="command", metavar="COMMAND")
        sub.required = True
        fmt = argparse.ArgumentDefaultsHelpFormatter

        p = sub.add_parser("datagen", help="generate a synthetic dataset", formatter_class=fmt)
        p.add_argument("--seed", type=int, default=0, help="dataset seed")
        p.add_argument("--count", type=int, required=True, help="number of scenes")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument(
            "--tasks",
            type=_task_list,
            default=list(DEFAULT_REGISTRY.keys()),
            help="comma-separated task keys",
        )
        p.add_argument("--config", help="config file (canvas size, canny ranges)")
        p.add_argument(
            "--workers", type=int, default=None, help="worker threads (capped by UNICONTROL_THREADS)"
        )
        p.set_defaults(handler=self._cmd_datagen)

        p = sub.add_parser("pretrain", help="pretrain the base denoiser", formatter_class=fmt)
        p.add_argument("--config", required=True, help="config file")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--out", required=True, help="output checkpoint")
        p.add_argument("--progress", action="store_true", help="show progress bars")
        p.set_defaults(handler=self._cmd_pretrain)

        p = sub.add_parser("train", help="train the control branch", formatter_class=fmt)
        p.add_argument("--config", required=True, help="config file")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--out", required=True, help="output checkpoint")
        p.add_argument("--base", help="pretrained base checkpoint")
        p.add_argument("--loss-log", help="per-step loss log (default: OUT with .loss suffix)")
        p.add_argument("--progress", action="store_true", help="show progress bars")
        p.set_defaults(handler=self._cmd_train)

        p = sub.add_parser("sample", help="sample with one visual condition", formatter_class=fmt)
        self._add_sampling_flags(p)
        p.add_argument("--task", required=True, help="task key")
        p.add_argument("--cond", required=True, help="condition (.ucds record, .ppm or raw tensor)")
        p.set_defaults(handler=self._cmd_sample)

        p = sub.add_parser("sample-hybrid", help="sample with two visual conditions", formatter_class=fmt)
        self._add_sampling_flags(p)
        p.add_argument("--task-a", required=True, help="background task key")
        p.add_argument("--cond-a", required=True, help="background condition")
        p.add_argument("--task-b", required=True, help="foreground task key")
        p.add_argument("--cond-b", required=True, help="foreground condition")
        p.add_argument("--background", default="", help="background keyword appended to the prompt")
        p.add_argument("--foreground", default="", help="foreground keyword appended to the prompt")
        p.set_defaults(handler=self._cmd_sample_hybrid)

        p = sub.add_parser("sample-zeroshot", help="sample an unseen task", formatter_class=fmt)
        self._add_sampling_flags(p)
        p.add_argument("--cond", required=True, help="condition, or source image with --transform")
        p.add_argument("--weights", type=_parse_weights, help="manual task weights k=v,...")
        p.add_argument("--instruction", help="instruction of the unseen task")
        p.add_argument("--preset", choices=sorted(ZERO_SHOT_PRESETS), help="named unseen task")
        p.add_argument(
            "--transform", choices=ZERO_SHOT_TRANSFORMS, help="derive the condition from the image"
        )
        p.set_defaults(handler=self._cmd_sample_zeroshot)

        p = sub.add_parser("eval", help="condition fidelity of a checkpoint", formatter_class=fmt)
        p.add_argument("--ckpt", required=True, help="checkpoint")
        p.add_argument("--data", help="held-out dataset directory (fresh scenes when omitted)")
        p.add_argument("--task", required=True, help="task key")
        p.add_argument("--samples", type=int, default=64, help="number of conditions")
        p.add_argument("--seed", type=int, default=0, help="sampling seed")
        p.add_argument("--progress", action="store_true", help="show progress bars")
        p.set_defaults(handler=self._cmd_eval)

        p = sub.add_parser("params", help="parameter accounting", formatter_class=fmt)
        p.add_argument("--config", help="config file (defaults when omitted)")
        p.set_defaults(handler=self._cmd_params)

        p = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
        p.add_argument("--seed", type=int, default=0, help="check seed")
        p.add_argument("--max-entries", type=int, default=4, help="coordinates per model tensor")
        p.add_argument("--primitives-only", action="store_true", help="skip the full-model check")
        p.set_defaults(handler=self._cmd_gradcheck)
        return parser

    @staticmethod
    def _add_sampling_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--ckpt", required=True, help="trained checkpoint")
        p.add_argument("--prompt", required=True, help="text prompt")
        p.add_argument("--out", required=True, help="output pixmap grid")
        p.add_argument("--guidance", type=float, default=9.0, help="classifier-free guidance weight")
        p.add_argument("--steps", type=int, default=50, help="DDIM steps")
        p.add_argument("--seed", type=int, default=0, help="noise seed")
        p.add_argument("--count", type=int, default=1, help="images to sample")
        p.add_argument("--progress", action="store_true", help="show progress bars")

    # -- entry point ---------------------------------------------------

    def dispatch(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Run one subcommand.

        Returns:
            0 on success, 1 when a check fails, 2 on usage or package errors
        """
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code) if isinstance(exc.code, int) else EXIT_ERROR
        level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
        logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        handler: Callable[[argparse.Namespace], int] = args.handler
        try:
            return handler(args)
        except (UniControlError, ValueError) as exc:
            logger.debug("command failed", exc_info=True)
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR

    # -- handlers ------------------------------------------------------

    def _cmd_datagen(self, args: argparse.Namespace) -> int:
        config = Config.load(args.config) if args.config else Config()
        manifest = write_dataset(
            args.out, args.count, args.seed, args.tasks, config.datagen_config(), args.workers
        )
        print(f"wrote {len(manifest)} records to {args.out}", file=self.out)
        return EXIT_OK

    def _cmd_pretrain(self, args: argparse.Namespace) -> int:
        config = Config.load(args.config)
        checkpoint = pretrain(config, load_dataset(args.data), progress=args.progress)
        save_checkpoint(args.out, checkpoint)
        print(f"wrote base checkpoint {args.out}", file=self.out)
        return EXIT_OK

    def _cmd_train(self, args: argparse.Namespace) -> int:
        config = Config.load(args.config)
        base = None
        if args.base:
            base = base_from_checkpoint(load_checkpoint(args.base), config.unet_config())
        loss_log = args.loss_log or str(Path(args.out).with_suffix(".loss"))
        dataset = load_dataset(args.data)
        checkpoint = train(config, dataset, base=base, loss_log=loss_log, progress=args.progress)
        save_checkpoint(args.out, checkpoint)
        print(f"wrote checkpoint {args.out} after {checkpoint.step} steps", file=self.out)
        return EXIT_OK

    def _sample(self, args: argparse.Namespace, prompt: str, conditioning: Conditioning) -> int:
        config, model = model_from_checkpoint(load_checkpoint(args.ckpt))
        guidance = GuidanceConfig(weight=args.guidance, steps=args.steps, prompt_drop_prob=config.drop_prob)
        images = sample_images(
            model,
            encode_text(prompt),
            conditioning,
            config.schedule(),
            guidance,
            args.seed,
            args.count,
            config.image_size,
            progress=args.progress,
        )
        raw = save_images(args.out, images)
        print(f"wrote {args.out} and {raw} ({conditioning.label or 'unconditional'})", file=self.out)
        return EXIT_OK

    def _cmd_sample(self, args: argparse.Namespace) -> int:
        conditioning = Conditioning.single(args.task, read_image_file(args.cond))
        return self._sample(args, args.prompt, conditioning)

    def _cmd_sample_hybrid(self, args: argparse.Namespace) -> int:
        hybrid = compose_hybrid(
            args.task_a,
            read_image_file(args.cond_a),
            args.task_b,
            read_image_file(args.cond_b),
            args.prompt,
            background=args.background,
            foreground=args.foreground,
        )
        return self._sample(args, hybrid.prompt, hybrid.conditioning)

    def _cmd_sample_zeroshot(self, args: argparse.Namespace) -> int:
        preset = ZERO_SHOT_PRESETS.get(args.preset) if args.preset else None
        instruction = args.instruction or (preset.instruction if preset else DEFAULT_INSTRUCTION)
        transform = args.transform or (preset.transform if preset else None)
        if args.weights is not None:
            weights = estimate_task_weights(instruction, "manual", args.weights)
        elif preset is not None and args.instruction is None:
            weights = preset.weights()
        elif args.instruction is not None:
            weights = estimate_task_weights(instruction, "similarity")
        else:
            raise ConfigError("sample-zeroshot needs --weights, --instruction or --preset")
        if transform is not None:
            cond = zero_shot_condition(read_record_image(args.cond), transform)
        else:
            cond = read_image_file(args.cond)
        logger.info("zero-shot weights: %s", np.array2string(weights, precision=3))
        return self._sample(args, args.prompt, Conditioning.blended(cond, weights, instruction))

    def _cmd_eval(self, args: argparse.Namespace) -> int:
        dataset = load_dataset(args.data) if args.data else None
        report = eval_condition_fidelity(
            load_checkpoint(args.ckpt),
            args.task,
            args.samples,
            args.seed,
            dataset=dataset,
            progress=args.progress,
        )
        self.out.write(format_fidelity(report))
        return EXIT_OK

    def _cmd_params(self, args: argparse.Namespace) -> int:
        config = Config.load(args.config) if args.config else Config()
        model = init_unicontrol(config.unet_config(), config.control_config(), config.seed)
        self.out.write(format_param_table(count_params(model)))
        return EXIT_OK

    def _cmd_gradcheck(self, args: argparse.Namespace) -> int:
        reports = run_gradcheck_suite(
            seed=args.seed, max_entries=args.max_entries, include_model=not args.primitives_only
        )
        self.out.write(format_gradcheck(reports))
        return EXIT_OK if all(report.passed for report in reports) else EXIT_FAILURE
