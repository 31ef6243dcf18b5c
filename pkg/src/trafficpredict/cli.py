"""Command-line entry point: generate, train, predict and eval."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field

from . import data as D
from . import eval as E
from . import model as M
from . import train as T
from .errors import ConfigurationError, NumericError, ParseError, UsageError, ValidationError
from .graph4d import CATEGORY_NAMES
from .seeding import sub_seed

log = logging.getLogger("trafficpredict")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_DATA = 5

COMMANDS = ("generate", "train", "predict", "eval")
RUN_MODES = M.MODES + ("constant_velocity",)
EVAL_METHODS = RUN_MODES + ("oracle",)

_RUN_KEYS = {"seed": int, "mode": str, "data": str, "out": str, "checkpoint": str,
             "epochs": int, "workers": int, "stride": int}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(T.TrainConfig)
               if f.name not in ("seed", "epochs")}
_SCENARIO_KEYS = {f.name for f in dataclasses.fields(D.ScenarioSpec) if f.name != "seed"}
_MODEL_KEYS = {f.name for f in dataclasses.fields(M.ModelConfig) if f.name != "mode"}


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def _convert(value, default, key):
    try:
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int) and not isinstance(default, bool):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if default is None:
            return int(value)
        return str(value)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {value!r}") from exc


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    mode: str = "full"
    data: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    epochs: int = 20
    workers: int = 1
    stride: int = 3
    train: T.TrainConfig = field(default_factory=T.TrainConfig)
    scenario: D.ScenarioSpec = field(default_factory=D.ScenarioSpec)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    mode_given: bool = False

    @classmethod
    def build(cls, command, settings):
        """RunConfig from flat ``key -> text`` settings (config file merged with flags)."""
        if command not in COMMANDS:
            raise ConfigurationError(f"unknown command {command!r}")
        run, train_kw, scen_kw, model_kw = {}, {}, {}, {}
        for key, value in settings.items():
            if key in _RUN_KEYS:
                run[key] = _RUN_KEYS[key](value) if not isinstance(value, _RUN_KEYS[key]) else value
            elif key in _TRAIN_KEYS:
                train_kw[key] = _convert(value, getattr(T.TrainConfig, key), key)
            elif key in _SCENARIO_KEYS:
                scen_kw[key] = _convert(value, getattr(D.ScenarioSpec, key), key)
            elif key in _MODEL_KEYS:
                default = getattr(M.ModelConfig, key)
                model_kw[key] = float(value) if key == "radius" else _convert(value, default, key)
            else:
                raise ConfigurationError(f"unknown configuration key {key!r}")
        seed = int(run.get("seed", 0))
        epochs = int(run.get("epochs", 20))
        mode = run.get("mode", "full")
        modes = mode.split(",") if command == "eval" else [mode]
        allowed = EVAL_METHODS if command == "eval" else RUN_MODES
        for m in modes:
            if m not in allowed:
                raise ConfigurationError(f"unknown mode {m!r}; expected one of {allowed}")
        learned = mode if mode in M.MODES else "full"
        return cls(command=command, seed=seed, mode=mode, data=run.get("data"), out=run.get("out"),
                   checkpoint=run.get("checkpoint"), epochs=epochs,
                   workers=int(run.get("workers", 1)), stride=int(run.get("stride", 3)),
                   train=T.TrainConfig(seed=seed, epochs=epochs, **train_kw),
                   scenario=D.ScenarioSpec(seed=sub_seed(seed, "data"), **scen_kw),
                   model=M.ModelConfig(mode=learned, **model_kw),
                   mode_given="mode" in settings)

    def require(self, *names):
        missing = [f"--{n}" for n in names if not getattr(self, n)]
        if missing:
            raise ConfigurationError(f"{self.command} needs {', '.join(missing)}")

    def require_file(self, name):
        path = getattr(self, name)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"--{name}: no such file: {path}")
        return path


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg, stdout):
    cfg.require("out")
    records = D.generate_scenario(cfg.scenario)
    D.save_trajectories(records, cfg.out)
    agents = {}
    for r in records:
        agents.setdefault(r.category, set()).add(r.agent_id)
    frames = len({r.frame for r in records})
    counts = " ".join(f"{CATEGORY_NAMES[c]}={len(agents.get(c, ()))}" for c in sorted(CATEGORY_NAMES))
    print(f"wrote {cfg.out}: {len(records)} records, {frames} frames, agents {counts}", file=stdout)
    return EXIT_OK


def run_header(cfg):
    tc = cfg.train
    return (f"run: {cfg.command} mode={cfg.mode} seed={cfg.seed} epochs={tc.epochs}\n"
            f"adam: beta1={tc.beta1} beta2={tc.beta2} lr={tc.lr} eps={tc.eps}\n"
            f"clip=±{tc.clip:g} batch={tc.batch_size} decay={tc.decay} every {tc.decay_every} epochs\n"
            f"window: t_obs={tc.t_obs} t_pred={tc.t_pred} stride={cfg.stride}")


def _windows(cfg, records):
    tc = cfg.train
    report = D.slice_windows(records, tc.t_obs, tc.t_pred, cfg.stride, with_report=True)
    windows = [w for w in report.windows if D.loss_ready(w, tc.t_obs, tc.t_pred)]
    if report.skipped_gaps:
        log.info("skipped %d windows spanning missing frames", report.skipped_gaps)
    return windows


def cmd_train(cfg, stdout):
    cfg.require("data", "out")
    if cfg.mode == "constant_velocity":
        raise ConfigurationError("constant_velocity has no parameters to train")
    records = D.load_trajectories(cfg.require_file("data"))
    os.makedirs(cfg.out, exist_ok=True)
    params = opt = None
    start_epoch = 0
    model_config = cfg.model
    if cfg.checkpoint:
        params, model_config, opt, meta = T.load_training_checkpoint(cfg.require_file("checkpoint"))
        if cfg.mode_given and model_config.mode != cfg.mode:
            raise ConfigurationError(f"checkpoint holds mode {model_config.mode!r}, not {cfg.mode!r}")
        start_epoch = int(meta.get("epoch", 0))
    windows = _windows(cfg, records)
    if not windows:
        raise ValidationError("data contains no complete training window")
    print(run_header(dataclasses.replace(cfg, mode=model_config.mode)), file=stdout)
    print(f"training windows: {len(windows)}", file=stdout)
    result = T.train_epochs(windows, model_config, cfg.train, params=params, opt=opt,
                            checkpoint_dir=cfg.out, name=model_config.mode, start_epoch=start_epoch)
    curve_path = os.path.join(cfg.out, f"{model_config.mode}_loss.csv")
    if start_epoch and os.path.isfile(curve_path):
        with open(curve_path, encoding="utf-8") as fh:
            old = [line.rstrip("\n").split(",") for line in fh.readlines()[1:] if line.strip()]
        old = [(int(e), float(n), float(l)) for e, n, l in old if int(e) <= start_epoch]
        result.curve = old + result.curve
    T.write_loss_curve(curve_path, result.curve)
    for epoch, nll, lr in result.curve[-cfg.train.epochs:] if cfg.train.epochs else []:
        print(f"epoch {epoch}: mean_nll={nll:.6f} lr={lr:.6g}", file=stdout)
    print(f"optimizer steps: {result.opt.step}", file=stdout)
    print(f"loss curve: {curve_path}", file=stdout)
    if result.checkpoints:
        print(f"final checkpoint: {result.checkpoints[-1]}", file=stdout)
    return EXIT_OK


def _observation_window(records, t_obs):
    frames = sorted({r.frame for r in records})
    if len(frames) < t_obs:
        raise ValidationError(f"need {t_obs} observed frames, file has {len(frames)}")
    last = frames[-t_obs:]
    if last != list(range(last[0], last[0] + t_obs)):
        raise ValidationError(f"the last {t_obs} frames are not consecutive: {last}")
    keep = set(last)
    return D.normalize_window([r for r in records if r.frame in keep])


def cmd_predict(cfg, stdout):
    cfg.require("data", "checkpoint", "out")
    if cfg.mode_given and cfg.mode == "constant_velocity":
        raise ConfigurationError("constant_velocity has no predictive distribution; use eval")
    params, model_config, _, meta = T.load_training_checkpoint(cfg.require_file("checkpoint"))
    if cfg.mode_given and model_config.mode != cfg.mode:
        raise ConfigurationError(f"checkpoint holds mode {model_config.mode!r}, not {cfg.mode!r}")
    train_meta = meta.get("train", {})
    t_obs = int(train_meta.get("t_obs", cfg.train.t_obs))
    t_pred = int(train_meta.get("t_pred", cfg.train.t_pred))
    records = D.load_trajectories(cfg.require_file("data"))
    window = _observation_window(records, t_obs)
    res = M.rollout(window.frames, params, model_config, t_obs, t_pred, "predict")
    cats = res.categories
    rows = []
    for t in range(t_obs, t_pred):
        for agent in sorted(res.predictions):
            g = res.gaussians[(agent, t)]
            x, y = window.to_meters(res.predictions[agent][t - t_obs])
            rows.append((window.start_frame + t, agent, cats[agent], float(x), float(y),
                         float(g.sigma_x / window.scale), float(g.sigma_y / window.scale), float(g.rho)))
    with open(cfg.out, "w", newline="", encoding="utf-8") as fh:
        fh.write("frame,agent_id,category,x,y,sigma_x,sigma_y,rho\n")
        for r in rows:
            fh.write(",".join([str(r[0]), str(r[1]), str(r[2]), *(repr(v) for v in r[3:])]) + "\n")
    print(f"wrote {cfg.out}: {len(res.predictions)} agents, frames "
          f"{window.start_frame + t_obs}..{window.start_frame + t_pred - 1}", file=stdout)
    return EXIT_OK


def _checkpoint_paths(cfg, learned):
    """``{mode: path}`` from a directory of ``<mode>.ckpt`` files or a ``mode=path,...`` list."""
    spec = cfg.checkpoint or ""
    paths = {}
    if "=" in spec:
        for item in spec.split(","):
            key, _, path = item.partition("=")
            paths[key.strip()] = path.strip()
    elif spec:
        for m in learned:
            paths[m] = os.path.join(spec, f"{m}.ckpt")
    missing = [m for m in learned if m not in paths or not os.path.isfile(paths[m])]
    if missing:
        raise ConfigurationError(f"missing checkpoint for: {', '.join(missing)}")
    return paths


def cmd_eval(cfg, stdout):
    cfg.require("data", "out")
    methods_requested = cfg.mode.split(",") if cfg.mode_given else list(RUN_MODES)
    learned = [m for m in methods_requested if m in M.MODES]
    paths = _checkpoint_paths(cfg, learned)
    tc = cfg.train
    methods = {}
    for m in methods_requested:
        if m == "constant_velocity":
            methods[m] = E.ConstantVelocityMethod()
        elif m == "oracle":
            methods[m] = E.OracleMethod()
        else:
            params, model_config, _, _ = T.load_training_checkpoint(paths[m])
            if model_config.mode != m:
                raise ConfigurationError(f"{paths[m]} holds mode {model_config.mode!r}, not {m!r}")
            methods[m] = E.LearnedMethod(params, model_config)
    records = D.load_trajectories(cfg.require_file("data"))
    windows = _windows(cfg, records)
    report = E.evaluate(windows, methods, tc.t_obs, tc.t_pred, workers=cfg.workers)
    os.makedirs(cfg.out, exist_ok=True)
    csv_path = os.path.join(cfg.out, "report.csv")
    txt_path = os.path.join(cfg.out, "report.txt")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    text = report.to_table("normalized") + "\n" + report.to_table("meters")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, file=stdout, end="")
    print(f"report: {csv_path}", file=stdout)
    return EXIT_OK


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key=value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", help="model mode (eval: comma-separated method list)")
    common.add_argument("--data", metavar="PATH")
    common.add_argument("--out", metavar="PATH")
    common.add_argument("--checkpoint", metavar="PATH")
    common.add_argument("--epochs", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="trafficpredict", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic trajectory CSV")
    sub.add_parser("train", parents=[common], help="train one model mode")
    sub.add_parser("predict", parents=[common], help="closed-loop prediction from observations")
    sub.add_parser("eval", parents=[common], help="ADE/FDE comparison report")
    return parser


def load_settings(args):
    settings = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
        try:
            settings.update(D.parse_key_value(text))
        except ParseError as exc:
            raise ConfigurationError(f"{args.config}: {exc}") from exc
    for key in ("seed", "mode", "data", "out", "checkpoint", "epochs", "workers"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    return settings


def main(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=stderr)
    try:
        cfg = RunConfig.build(args.command, load_settings(args))
        return HANDLERS[args.command](cfg, stdout)
    except (ParseError, ValidationError) as exc:
        print(f"error: invalid data: {exc}", file=stderr)
        return EXIT_DATA
    except (ConfigurationError, UsageError) as exc:
        print(f"error: configuration: {exc}", file=stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: I/O: {exc}", file=stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
