import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from experiments import (
    INIT_CHOICES,
    VARIANTS,
    ExperimentKind,
    ExperimentSpec,
    initial_estimate,
    load_spec,
    refine,
    run_experiment,
    save_spec,
)
from refinement import Sampling, save_trace, trace_summary
from signal_model import Field, gen_gaussian_sensing, gen_gaussian_signal, load_problem, measure, save_problem
from utils import ArgumentError, StafError, split_seed

logger = logging.getLogger(__name__)

# Какой флаг задает сетку для каждого вида эксперимента
GRID_FLAG = {
    ExperimentKind.SUCCESS_RATE: "m_over_n",
    ExperimentKind.CONVERGENCE_TRACE: "m_over_n",
    ExperimentKind.EIGENGAP_SWEEP: "m_over_n",
    ExperimentKind.INIT_RACE: "m_over_n",
    ExperimentKind.NOISE_RUN: "sigma",
    ExperimentKind.CDP_IMAGE: "masks",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n", type=int, help="Размерность сигнала")
    parser.add_argument("--m-over-n", type=float, nargs="+", help="Отношение m/n (одно или сетка)")
    parser.add_argument("--trials", type=int, help="Число испытаний Монте-Карло")
    parser.add_argument("--seed", type=int, help="Базовое семя")
    parser.add_argument("--step-rule", choices=VARIANTS, nargs="+", help="Варианты уточнения")
    parser.add_argument("--sampling", choices=[s.value for s in Sampling], help="Схема выбора уравнений")
    parser.add_argument("--gamma", type=float, help="Порог усечения")
    parser.add_argument("--mu", type=float, help="Шаг (постоянный шаг STAF или mu/n для CDP)")
    parser.add_argument("--passes", type=float, help="Бюджет уточнения в проходах")
    parser.add_argument("--target", type=float, help="Порог остановки по относительной ошибке")
    parser.add_argument("--out", help="Путь к таблице результатов")
    parser.add_argument("--format", dest="fmt", choices=["csv", "json"], help="Формат таблицы")
    parser.add_argument("--spec", help="JSON-файл спецификации (флаги имеют приоритет)")
    parser.add_argument("--save-spec", help="Записать итоговую спецификацию в JSON")
    parser.add_argument("--field", choices=[f.value for f in Field], help="Вещественная или комплексная задача")
    parser.add_argument("--init", dest="init_solver", choices=INIT_CHOICES, help="Метод инициализации")
    parser.add_argument("--init-passes", type=int, help="Бюджет инициализации в проходах")
    parser.add_argument("--fraction", type=float, help="Доля строк в Ī₀")
    parser.add_argument(
        "--workers",
        type=int,
        help="Число процессов (CLI > spec > env:STAF_WORKERS > число ядер)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="staf-bench",
        description="Восстановление фазы методом STAF: эксперименты и решение отдельных задач",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for kind in ExperimentKind:
        p = sub.add_parser(kind.value, help=f"Эксперимент {kind.value}")
        _add_common(p)
        if kind is ExperimentKind.NOISE_RUN:
            p.add_argument("--sigma", type=float, nargs="+", help="Уровни шума (сетка)")
        if kind is ExperimentKind.INIT_RACE:
            p.add_argument("--planted-gap", type=float, help="Синтетическая задача с заданным зазором")
        if kind is ExperimentKind.CDP_IMAGE:
            p.add_argument("--masks", type=int, nargs="+", help="Число масок K (сетка)")
            p.add_argument("--image", help="PNG-файл; по умолчанию синтетический градиент")
            p.add_argument("--image-size", type=int, help="Размер синтетического изображения")

    solve = sub.add_parser("solve", help="Решить одну задачу и записать историю запуска")
    solve.add_argument("--problem", help="Файл задачи (.npz или .json); иначе генерируется гауссова задача")
    solve.add_argument("--save-problem", help="Сохранить сгенерированную задачу")
    solve.add_argument("--sigma", type=float, default=0.0, help="Уровень шума генерируемой задачи")
    _add_common(solve)
    return parser


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    """
    Собирает спецификацию: флаги CLI поверх файла --spec поверх
    умолчаний вида эксперимента.

    Args:
        args (argparse.Namespace): Разобранные аргументы

    Returns:
        ExperimentSpec: Спецификация
    """
    kind = ExperimentKind(args.command)
    values: Dict[str, Any] = {}
    for name in ("n", "trials", "seed", "sampling", "gamma", "mu", "passes", "out", "fmt",
                 "field", "init_solver", "init_passes", "fraction", "workers"):
        values[name] = getattr(args, name, None)
    values["target_rel_err"] = args.target
    values["planted_gap"] = getattr(args, "planted_gap", None)
    values["image"] = getattr(args, "image", None)
    values["image_size"] = getattr(args, "image_size", None)
    if args.step_rule:
        values["step_rules"] = list(args.step_rule)

    grid = getattr(args, GRID_FLAG[kind], None)
    if grid:
        values["grid"] = [float(g) for g in grid]
    if kind is ExperimentKind.NOISE_RUN and args.m_over_n:
        if len(args.m_over_n) != 1:
            raise ArgumentError("Для эксперимента noise задается одно значение --m-over-n")
        values["ratio"] = args.m_over_n[0]

    overrides = {key: value for key, value in values.items() if value is not None}
    if args.spec:
        spec = load_spec(args.spec)
        if spec.kind is not kind:
            raise ArgumentError(f"Файл {args.spec} описывает эксперимент {spec.kind.value}, а не {kind.value}")
        spec = replace(spec, **overrides)
    else:
        spec = ExperimentSpec.for_kind(kind, **overrides)
    spec.validate()
    return spec


def run_solve(args: argparse.Namespace) -> int:
    """Подкоманда solve: одна задача, одна история запуска."""
    if args.spec:
        raise ArgumentError("Подкоманда solve не принимает --spec")
    if args.out is None:
        raise ArgumentError("Для solve нужен --out (CSV истории запуска)")
    variants = args.step_rule or ["kaczmarz"]
    if len(variants) != 1:
        raise ArgumentError("Для solve задается ровно одно правило шага")
    spec = ExperimentSpec.for_kind(
        ExperimentKind.SUCCESS_RATE,
        n=args.n, seed=args.seed, sampling=args.sampling, gamma=args.gamma, mu=args.mu,
        passes=args.passes, target_rel_err=args.target, field=args.field,
        init_solver=args.init_solver, init_passes=args.init_passes, fraction=args.fraction,
        step_rules=variants,
    )
    spec.validate()
    seed_streams = split_seed(spec.seed, 5)
    if args.problem:
        ens, meas, x = load_problem(args.problem)
        logger.info("Загружена задача %s: m=%d, n=%d, поле %s", args.problem, ens.m, ens.n, ens.field.value)
    else:
        ratio = args.m_over_n[0] if args.m_over_n else 5.0
        m = max(1, int(round(ratio * spec.n)))
        x = gen_gaussian_signal(spec.n, spec.field, seed_streams[0])
        ens = gen_gaussian_sensing(m, spec.n, spec.field, seed_streams[1])
        meas = measure(ens, x, args.sigma, seed_streams[2])
        if args.save_problem:
            save_problem(args.save_problem, ens, meas, x, spec.seed)
    z0 = initial_estimate(spec, ens, meas, x, seed_streams[3])
    trace = refine(spec, variants[0], ens, meas, z0, x, seed_streams[4])
    save_trace(trace, Path(args.out))
    summary = trace_summary(trace)
    logger.info("Проходов %.1f, финальная ошибка %s, успех %s",
                summary["passes_used"], summary["final_rel_err"], summary["success"])
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """
    Точка входа CLI.

    Args:
        argv (Optional[List[str]]): Аргументы командной строки

    Returns:
        int: Код возврата (0 при успехе, 1 при ошибке)
    """
    level_name = os.getenv("STAF_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(level_name)
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if not isinstance(level, int):
        logger.warning("Неизвестный уровень STAF_LOG_LEVEL=%s, используется INFO", level_name)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "solve":
            return run_solve(args)
        spec = spec_from_args(args)
        if args.save_spec:
            save_spec(spec, args.save_spec)
        table = run_experiment(spec)
        if spec.out is None:
            print(table.frame.to_string(index=False))
        return 0
    except (StafError, OSError) as e:
        logger.error("Ошибка: %s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
