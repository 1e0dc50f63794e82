"""
Run orchestration: dataset, base model, search, reports.
"""

import os
import time
from typing import Optional

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict
from .datasets import Dataset, builtin_dataset, load_dataset
from .evolution import Evolution
from .exceptions import ConfigError, DataError, RunStateError
from .metrics import MeasurementSettings, MetricVector, evaluate_network
from .network import TASK_LOSSES, Network, Task, build_mlp, build_tiny_resnet, output_width
from .optim import Optimizer
from .regularizers import CompositeLoss
from .rng import make_rng
from .training import train
from .utils import (
    BASE_CHECKPOINT,
    check_run_status,
    config_hash,
    log_message,
    read_run_config,
    setup_run_directory,
    write_run_config,
)


def prepare_dataset(config: RunConfig) -> Dataset:
    """Generate or load the dataset named by ``config.task``, split with the run seed."""
    t = config.task
    seed = config.evolution.seed
    if t.format == "builtin":
        data = builtin_dataset(t.dataset, seed=seed, n=t.samples, fractions=t.split)
        if t.kind is not None and Task(t.kind) != data.task:
            raise ConfigError(f"task.kind '{t.kind}' does not match builtin dataset "
                              f"'{t.dataset}' ({data.task.value})")
        return data
    return load_dataset(t.dataset, t.format, task=t.kind, seed=seed, fractions=t.split)


def base_loss(config: RunConfig, task: Task) -> str:
    losses = TASK_LOSSES[Task(task)]
    loss = config.training.loss or losses[0]
    if loss not in losses:
        raise ConfigError(f"training.loss '{loss}' does not fit a {Task(task).value} task "
                          f"(choose from {losses})")
    return loss


def build_base_model(config: RunConfig, data: Dataset) -> Network:
    """Untrained built-in architecture sized for ``data``."""
    m = config.model
    rng = make_rng(config.evolution.seed, "init")
    width = output_width(data.task, data.num_classes)
    loss = base_loss(config, data.task)
    if m.architecture == "mlp":
        if len(data.input_shape) != 1:
            raise ConfigError(f"model.architecture 'mlp' needs flat features, got {data.input_shape}")
        return build_mlp(data.input_shape[0], m.hidden, width, data.task, loss, rng)
    if len(data.input_shape) != 3:
        raise ConfigError(f"model.architecture 'tiny_resnet' needs (c, h, w) inputs, "
                          f"got {data.input_shape}")
    return build_tiny_resnet(data.input_shape, m.channels, width, data.task, loss, rng)


def pretrain(net: Network, data: Dataset, config: RunConfig) -> Network:
    """Train the base model with the run-level hyperparameters (no-op for 0 epochs)."""
    tr = config.training
    if tr.epochs == 0:
        return net
    result = train(net, data, tr.epochs, Optimizer(tr.optimizer, tr.learning_rate),
                   CompositeLoss(net.loss), batch_size=tr.batch_size,
                   rng=make_rng(config.evolution.seed, "pretrain"))
    return result.network


def model_defaults(config: RunConfig, task: Task) -> dict:
    tr = config.training
    return {"optimizer": tr.optimizer, "learning_rate": tr.learning_rate,
            "batch_size": tr.batch_size, "loss": base_loss(config, task)}


def _search(config: RunConfig, run_dir: str, digest: str, workers: int, verbose: bool,
            stop_after: Optional[int]) -> dict:
    status = check_run_status(run_dir)

    # Step 1: data
    print("\n[1/4] Preparing dataset...")
    log_message(run_dir, "Step 1/4: Preparing dataset")
    data = prepare_dataset(config)
    print(f"  ✓ {data.name or config.task.dataset}: {len(data.train_idx)}/{len(data.val_idx)}/"
          f"{len(data.test_idx)} train/val/test, task {data.task.value}")
    log_message(run_dir, f"Dataset ready: {len(data)} samples, task {data.task.value}", level='SUCCESS')

    # Step 2: base model
    print("\n[2/4] Preparing base model...")
    log_message(run_dir, "Step 2/4: Preparing base model")
    base_path = os.path.join(run_dir, BASE_CHECKPOINT)
    if status['has_base']:
        base = load_checkpoint(base_path)
        print(f"  ⚠ Base model already exists, reusing {base_path}")
        log_message(run_dir, "Base model already exists, skipping pretraining", level='WARNING')
    else:
        base = build_base_model(config, data)
        if config.evolution.init_mode == "pretrained":
            started = time.perf_counter()
            base = pretrain(base, data, config)
            print(f"  ✓ Pretrained for {config.training.epochs} epoch(s) "
                  f"in {time.perf_counter() - started:.1f}s")
        else:
            print("  ⚠ Untrained mode: the search starts from random weights")
        save_checkpoint(base, base_path)
        log_message(run_dir, f"Base model saved: {base_path}", level='SUCCESS')

    # Step 3: search
    print("\n[3/4] Running evolutionary search...")
    log_message(run_dir, "Step 3/4: Running evolutionary search")
    m = config.measurement
    evo = Evolution(
        config.evolution, base, data, run_dir=run_dir, axes=config.objectives,
        devices=config.devices,
        settings=MeasurementSettings(m.latency_repeats, m.latency_warmup,
                                     m.throughput_batch, m.throughput_iterations),
        timing=m.timing, workers=workers, config_hash=digest,
        model_defaults=model_defaults(config, data.task), verbose=verbose,
    )
    if status['has_state']:
        evo.resume()
    result = evo.run(stop_after=stop_after)

    # Step 4: reports
    print("\n[4/4] Writing reports...")
    log_message(run_dir, "Step 4/4: Writing reports")
    from .report import write_reports
    from .visualization import plot_percent_change

    reports = write_reports(run_dir)
    plot = plot_percent_change(run_dir)
    for path in list(reports.values()) + [plot]:
        print(f"  ✓ {path}")

    print(f"\nArchive: {len(result.archive)} member(s), hypervolume {result.hypervolume:.6g}")
    log_message(run_dir, f"Search {'finished' if result.finished else 'interrupted'} at "
                         f"generation {result.generation}", level='SUCCESS')
    return {
        'run_dir': run_dir,
        'result': result,
        'reports': reports,
        'plot': plot,
        'config_path': os.path.join(run_dir, 'config.json'),
    }


def run_search(config: RunConfig, workers: int = 1, verbose: bool = True,
               stop_after: Optional[int] = None) -> dict:
    """Complete workflow: dataset, base model, search, reports and plot.

    A run directory that already holds state from the same config is
    resumed; one from a different config is refused.

    Parameters
    ----------
    config : RunConfig
        Validated run configuration.
    workers : int, default 1
        Evaluation threads.
    verbose : bool, default True
        Print per-generation progress.
    stop_after : int, optional
        Interrupt after this generation's barrier (resumable).

    Returns
    -------
    dict
        ``run_dir``, ``result`` (EvolutionResult), ``reports`` (format -> path),
        ``plot`` and ``config_path``.

    Raises
    ------
    RunStateError
        If ``output_dir`` holds a run of another config.

    Examples
    --------
    >>> out = run_search(load_config('configs/desk_two_gaussians.json'))
    >>> out['reports']['md']
    '/abs/runs/desk/reports/report.md'
    """
    settings = config.to_dict()
    digest = config_hash(settings)
    run_dir = os.path.abspath(config.output_dir)
    status = check_run_status(run_dir)
    if status['has_config'] and status['config'] is not None \
            and status['config'].get('config_hash') != digest:
        raise RunStateError(f"{run_dir} holds a run of another config (config hash mismatch); "
                            f"choose another output_dir")

    run_dir = setup_run_directory(run_dir)
    print(f"Run directory: {run_dir}")
    log_message(run_dir, f"Starting search on '{config.task.dataset}' with seed {config.evolution.seed}")
    if not status['has_config']:
        path = write_run_config(run_dir, settings)
        log_message(run_dir, f"Configuration saved to {path}")
        print(f"Configuration saved: {path}")
    return _search(config, run_dir, digest, workers, verbose, stop_after)


def resume_search(run_dir: str, workers: int = 1, verbose: bool = True,
                  stop_after: Optional[int] = None) -> dict:
    """Continue an interrupted run from its last generation barrier.

    Raises
    ------
    RunStateError
        Missing directory, missing config snapshot or a snapshot whose
        content no longer matches its stored hash.
    """
    run_dir = os.path.abspath(run_dir)
    status = check_run_status(run_dir)
    if not status['exists']:
        raise RunStateError(f"Run directory not found: {run_dir}")
    snapshot = read_run_config(run_dir)
    if snapshot is None:
        raise RunStateError(f"No config.json in {run_dir}; nothing to resume")
    config = config_from_dict(snapshot['config'])
    digest = config_hash(config.to_dict())
    if digest != snapshot.get('config_hash'):
        raise RunStateError(f"config hash mismatch in {run_dir}: the snapshot was edited")
    if status['finished']:
        print(f"  ⚠ Run already finished at generation {status['generation']}")
    log_message(run_dir, f"Resuming run at generation {status['generation']}")
    return _search(config, run_dir, digest, workers, verbose, stop_after)


def evaluate_checkpoint(checkpoint: str, data_path: str, fmt: str = "csv",
                        task: Optional[str] = None, seed: int = 0,
                        devices=("cpu", "gpu"), timing: bool = True) -> MetricVector:
    """Measure a saved network on the test split of a dataset file.

    Raises
    ------
    DataError
        The dataset does not fit the network's input shape.
    """
    net = load_checkpoint(checkpoint)
    data = load_dataset(data_path, fmt, task=task or net.task.value, seed=seed)
    if data.input_shape != tuple(net.input_shape):
        raise DataError(f"Dataset features {data.input_shape} do not match the network input "
                        f"{tuple(net.input_shape)}")
    return evaluate_network(net, data.x_test, data.y_test, devices, timing=timing)
