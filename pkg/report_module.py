"""
Report Module - Report assembly and writers
Canonical JSON reports, tidy CSV extracts for plotting, optional XLSX workbook
"""

import dataclasses
import json
import logging
import math
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from policy_module import LockedThreshold, ThresholdPolicy

logger = logging.getLogger(__name__)

try:
    from openpyxl import Workbook
    EXCEL_AVAILABLE = True
except ImportError:
    EXCEL_AVAILABLE = False
    logger.warning("openpyxl not installed. XLSX extracts disabled.")

P_FLOOR = 0.001


def format_p(p: Optional[float]) -> Optional[str]:
    """Table style: 'P<0.001' below the floor, three decimals otherwise"""
    if p is None:
        return None
    if p < P_FLOOR:
        return "P<0.001"
    return f"P={p:.3f}"


def as_percent(value: Optional[float]) -> Optional[str]:
    return None if value is None else f"{100.0 * value:.1f}%"


def format_ci(point: Optional[float], lo: Optional[float], hi: Optional[float], digits: int = 3) -> Optional[str]:
    """'0.975 (0.965-0.984)'"""
    if point is None:
        return None
    if lo is None or hi is None:
        return f"{point:.{digits}f}"
    return f"{point:.{digits}f} ({lo:.{digits}f}-{hi:.{digits}f})"


def annotate_p(obj: Any) -> Any:
    """Add a '<key>_text' sibling for every p-value key ('p' or '*_p') of a JSON tree"""
    if isinstance(obj, list):
        return [annotate_p(v) for v in obj]
    if not isinstance(obj, dict):
        return obj
    out = {k: annotate_p(v) for k, v in obj.items()}
    for key, value in obj.items():
        if (key == 'p' or key.endswith('_p')) and (value is None or isinstance(value, float)):
            # '-' marks a test that was not applicable
            out[f"{key}_text"] = format_p(value) if value is not None else '-'
    return out


def to_jsonable(obj: Any) -> Any:
    """Plain JSON types; NaN becomes null, infinities stay (written as Infinity)"""
    if isinstance(obj, (LockedThreshold, ThresholdPolicy)):
        return to_jsonable(obj.to_dict())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        # repr=False fields hold fitted internals (design matrices, predictions)
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.repr}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(to_jsonable(k)): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [to_jsonable(v) for v in items]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, pd.DataFrame):
        return [to_jsonable(r) for r in obj.to_dict('records')]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return None if math.isnan(value) else value
    if isinstance(obj, datetime):
        return obj.isoformat()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(report: Dict) -> str:
    return json.dumps(annotate_p(to_jsonable(report)), sort_keys=True, indent=2) + '\n'


class ReportModule:
    """Writes reports and extracts into one output directory"""

    def __init__(self, out_dir: Union[str, Path], xlsx: bool = False):
        self.out_dir = Path(out_dir)
        self.xlsx = xlsx
        self.tables: Dict[str, List[Dict]] = {}
        if xlsx and not EXCEL_AVAILABLE:
            logger.warning("XLSX extract requested but openpyxl is not installed")

    def write_json(self, name: str, report: Dict) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"{name}.json"
        path.write_text(dumps(report), encoding='utf-8')
        logger.info(f"Report written to {path}")
        return path

    def write_csv(self, name: str, rows: Sequence[Dict]) -> Optional[Path]:
        """Tidy CSV extract; the rows are also kept for the workbook"""
        if not rows:
            logger.debug(f"Skipping empty extract '{name}'")
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        rows = [to_jsonable(r) for r in rows]
        path = self.out_dir / f"{name}.csv"
        pd.DataFrame(rows).to_csv(path, index=False)
        self.tables[name] = rows
        return path

    def write_xlsx(self, name: str = 'extracts') -> Optional[Path]:
        """One sheet per CSV extract written so far"""
        if not self.xlsx or not EXCEL_AVAILABLE or not self.tables:
            return None
        try:
            wb = Workbook()
            wb.remove(wb.active)
            for table, rows in self.tables.items():
                # sheet titles are limited to 31 characters
                ws = wb.create_sheet(title=table[:31])
                headers = list(dict.fromkeys(k for row in rows for k in row))
                ws.append(headers)
                for row in rows:
                    ws.append([self._cell(row.get(h)) for h in headers])
            path = self.out_dir / f"{name}.xlsx"
            wb.save(path)
            logger.info(f"Workbook written to {path}")
            return path
        except Exception as e:
            logger.error(f"Error exporting to Excel: {e}")
            return None

    @staticmethod
    def _cell(value: Any) -> Any:
        if isinstance(value, (dict, list)):
            return json.dumps(value, sort_keys=True)
        if isinstance(value, float) and math.isinf(value):
            return str(value)
        return value
