# Licensed under the MIT License.
"""CLI の実行時に使用するユーティリティ関数とクラス。"""
from __future__ import annotations

import contextlib
import io
import logging
import os
import os.path
import sys
import threading
from typing import Any, Callable, Optional, Sequence

import attrs
import numpy as np

# このモジュールをロードするときに使用する作業ディレクトリを保存します
START_CWD = os.getcwd()
CWD_LOCK = threading.Lock()

LOGGER = logging.getLogger("spci")
NOTIFICATION_LEVELS = {
    "off": logging.CRITICAL + 1,
    "onError": logging.ERROR,
    "onWarning": logging.WARNING,
    "always": logging.INFO,
}


def is_same_path(file_path1, file_path2) -> bool:
    """2 つのパスが同じ場合は true を返します。"""
    return os.path.normcase(os.path.normpath(file_path1)) == os.path.normcase(
        os.path.normpath(file_path2)
    )


SEED_STREAMS = {"init": 0, "dropout": 1, "input": 2, "toy": 3}


def derive_seed(seed: int, stream: str, index: int = 0) -> int:
    """`seed` から用途ごとに独立したシードを導出します。"""
    sequence = np.random.SeedSequence(seed, spawn_key=(SEED_STREAMS[stream], index))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


# *****************************************************
# ログ記録と通知。
# *****************************************************
class _StderrHandler(logging.Handler):
    """出力時点の sys.stderr に書き込みます (run_api のリダイレクトに追従します)。"""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            sys.stderr.write(self.format(record) + "\n")
        except Exception:  # pylint: disable=broad-except
            self.handleError(record)


class _NotificationFilter(logging.Filter):
    """トレースは verbose のときだけ、それ以外は SPCI_SHOW_NOTIFICATION に従って通します。"""

    def __init__(self, verbose: bool):
        super().__init__()
        self.verbose = verbose

    def filter(self, record: logging.LogRecord) -> bool:
        if record.levelno == logging.DEBUG:
            return self.verbose
        setting = os.getenv("SPCI_SHOW_NOTIFICATION", "onError")
        return record.levelno >= NOTIFICATION_LEVELS.get(setting, logging.ERROR)


def configure_logging(verbose: bool = False) -> None:
    """`spci` ロガーのハンドラーを (再) 設定します。"""
    for handler in list(LOGGER.handlers):
        LOGGER.removeHandler(handler)
    handler = _StderrHandler()
    handler.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
    handler.addFilter(_NotificationFilter(verbose))
    LOGGER.addHandler(handler)
    LOGGER.setLevel(logging.DEBUG)
    LOGGER.propagate = False


def log_to_output(message: str) -> None:
    LOGGER.debug(message)


def log_error(message: str) -> None:
    LOGGER.error(message)


def log_warning(message: str) -> None:
    LOGGER.warning(message)


def log_always(message: str) -> None:
    LOGGER.info(message)


# *****************************************************
# インプロセス実行。
# *****************************************************
@attrs.define
class RunResult:
    """CLI 実行の結果を保持するオブジェクト。"""

    stdout: str
    stderr: str
    returncode: int = 0


class CustomIO(io.TextIOWrapper):
    """stdio を置き換えるカスタム ストリーム オブジェクト。"""

    name = None

    def __init__(self, name, encoding="utf-8", newline=None):
        self._buffer = io.BytesIO()
        self._buffer.name = name
        super().__init__(self._buffer, encoding=encoding, newline=newline)

    def close(self):
        """一部の呼び出し元が close を呼ぶため、意図的に何もしません。"""

    def get_value(self) -> str:
        """バッファからの値を文字列として返します。"""
        self.seek(0)
        return self.read()


@contextlib.contextmanager
def substitute_attr(obj: Any, attribute: str, new_value: Any):
    """オブジェクト属性を一時的に置き換えます。"""
    old_value = getattr(obj, attribute)
    setattr(obj, attribute, new_value)
    try:
        yield
    finally:
        setattr(obj, attribute, old_value)


@contextlib.contextmanager
def redirect_io(stream: str, new_stream):
    """stdio ストリームをカスタム ストリームにリダイレクトします。"""
    with substitute_attr(sys, stream, new_stream):
        yield


@contextlib.contextmanager
def change_cwd(new_cwd):
    """コードを実行する前に作業ディレクトリを変更します。"""
    os.chdir(new_cwd)
    try:
        yield
    finally:
        os.chdir(START_CWD)


def _exit_code(exc: SystemExit) -> int:
    if exc.code is None:
        return 0
    if isinstance(exc.code, int):
        return exc.code
    sys.stderr.write(f"{exc.code}\n")
    return 1


def _run_api(callback: Callable[[Sequence[str]], Optional[int]], argv: Sequence[str]) -> RunResult:
    str_output = CustomIO("<stdout>", encoding="utf-8")
    str_error = CustomIO("<stderr>", encoding="utf-8")

    with substitute_attr(sys, "argv", list(argv)):
        with redirect_io("stdout", str_output):
            with redirect_io("stderr", str_error):
                try:
                    code = callback(list(argv[1:])) or 0
                except SystemExit as exc:
                    code = _exit_code(exc)
                str_output.flush()
                str_error.flush()

    return RunResult(str_output.get_value(), str_error.get_value(), code)


def run_api(
    callback: Callable[[Sequence[str]], Optional[int]],
    argv: Sequence[str],
    cwd: Optional[str] = None,
) -> RunResult:
    """`callback(argv[1:])` を実行し、stdout/stderr と終了コードを取得します。"""
    with CWD_LOCK:
        if cwd is None or is_same_path(os.getcwd(), cwd):
            return _run_api(callback, argv)
        with change_cwd(cwd):
            return _run_api(callback, argv)
