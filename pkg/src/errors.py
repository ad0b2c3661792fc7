"""
DeskRL 錯誤分類
各模組共用的例外類別；每個類別都繼承最接近的內建例外，呼叫端可擇一攔截。
"""

from __future__ import annotations


class ShapeError(ValueError):
    """維度不符、軸不合法或 loss 非純量。"""


class DomainError(ValueError):
    """數值定義域錯誤（例如 log 的輸入非正）。"""


class TapeError(RuntimeError):
    """Tape 已被消耗後再次使用。"""


class RoutingError(KeyError):
    """觀測群組缺失。"""

    def __init__(self, group: str, available=None):
        self.group = group
        self.available = sorted(available) if available is not None else None
        msg = f"觀測群組 '{group}' 不存在"
        if self.available is not None:
            msg += f"（可用群組：{self.available}）"
        super().__init__(msg)

    def __str__(self) -> str:
        return self.args[0]


class ConfigError(ValueError):
    """設定檔或超參數不合法。"""


class EnvFault(RuntimeError):
    """環境步進失敗（例如動作含 NaN）。"""

    def __init__(self, message: str, env_index: int | None = None):
        super().__init__(message)
        self.env_index = env_index


class NumericFault(ArithmeticError):
    """訓練 loss 出現 NaN / Inf。"""

    def __init__(self, stat: str, value: float):
        super().__init__(f"數值異常：{stat} = {value}")
        self.stat = stat
        self.value = value


class ConvergenceError(ArithmeticError):
    """迭代求解未收斂。"""


class ProtocolError(RuntimeError):
    """分散式訊息格式或流程錯誤。"""


class PeerDisconnected(ProtocolError):
    """通訊過程中對端斷線。"""

    def __init__(self, rank: int, detail: str = ""):
        super().__init__(f"rank {rank} 連線中斷 {detail}".strip())
        self.rank = rank


class StartupTimeout(ProtocolError):
    """啟動時未能等到所有 rank 連線。"""

    def __init__(self, missing_ranks):
        self.missing_ranks = sorted(missing_ranks)
        super().__init__(f"等待連線逾時，缺少 rank：{self.missing_ranks}")


class DivergenceError(RuntimeError):
    """各 rank 參數校驗和不一致。"""


class FormatError(ValueError):
    """checkpoint / 匯出檔格式損毀。"""


class EvaluationError(RuntimeError):
    """評估無法產生報告。"""


__all__ = [
    "ShapeError",
    "DomainError",
    "TapeError",
    "RoutingError",
    "ConfigError",
    "EnvFault",
    "NumericFault",
    "ConvergenceError",
    "ProtocolError",
    "PeerDisconnected",
    "StartupTimeout",
    "DivergenceError",
    "FormatError",
    "EvaluationError",
]
