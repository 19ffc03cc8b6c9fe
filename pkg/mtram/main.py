"""
命令行入口：
- 子命令 gen / pretrain / train / eval / ablate（见 commands 包）
- 公共参数 --config / --seed / --out / --set dotted.path=value
- 退出码：0 成功，1 配置校验失败，2 运行期失败
"""
from __future__ import annotations

import argparse
import logging
import sys
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .commands import COMMANDS
from .commands.common import load_run_config
from .config import settings
from .errors import ConfigError, MtramError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _configure_logging() -> None:
    log_dir = Path(settings.LOG_DIR or "logs")
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / "mtram.log"
    root = logging.getLogger()

    # 统一格式
    formatter = logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s")

    # 确保文件日志处理器存在（幂等），本地午夜切割
    file_handler = None
    for h in root.handlers:
        if isinstance(h, TimedRotatingFileHandler) and getattr(h, "baseFilename", None) == str(log_file.absolute()):
            file_handler = h
            break
    if file_handler is None:
        file_handler = TimedRotatingFileHandler(
            filename=log_file,
            when="midnight",
            interval=1,
            backupCount=settings.LOG_FILE_BACKUPS,
            encoding="utf-8",
            utc=False,
        )
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    # 确保控制台处理器存在（幂等）；文件处理器也是 StreamHandler 的子类，需排除
    has_console = any(
        isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler) for h in root.handlers
    )
    if not has_console:
        console = logging.StreamHandler(stream=sys.stdout)
        console.setFormatter(formatter)
        root.addHandler(console)

    root.setLevel(getattr(logging, settings.LOG_LEVEL, logging.INFO))


class _Parser(argparse.ArgumentParser):
    """参数错误按配置错误处理（退出码 1），而不是 argparse 默认的 2"""

    def error(self, message: str):  # type: ignore[override]
        raise ConfigError([message])


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="运行配置 JSON 路径")
    common.add_argument("--seed", type=int, default=None, help="运行种子（覆盖配置中的 seed）")
    common.add_argument("--out", default=None, help="产物根目录（默认取 MTRAM_OUT_DIR）")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="按 dotted 路径覆盖配置字段，可重复，例如 --set train.epochs=3",
    )

    parser = _Parser(prog="mtram", description="MT-RAM 多任务医疗编码分类")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for module in COMMANDS:
        p = sub.add_parser(module.NAME, help=module.HELP, parents=[common])
        module.configure(p)
        p.set_defaults(handler=module.run)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
        cfg = load_run_config(args.config, args.overrides, args.seed)
        logger.info("执行 %s（seed=%d）", args.command, cfg.seed)
        args.handler(args, cfg)
        return EXIT_OK
    except ConfigError as exc:
        logger.error("%s", exc)
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except MtramError as exc:
        logger.exception("运行失败：%s", exc)
        print(f"运行失败：{exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        logger.exception("未预期的错误：%s", exc)
        print(f"未预期的错误：{exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
