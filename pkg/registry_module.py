"""
Registry Module - Persistent store of locked thresholds
Append-only JSON file; an entry for an existing (task, band) is only added
with an explicit relock, and the latest entry wins on lookup
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

from dateutil import parser

from policy_module import LockedThreshold, ThresholdPolicy

logger = logging.getLogger(__name__)

DEFAULT_REGISTRY = 'locked_thresholds.json'


class RegistryError(ValueError):
    """Raised for missing entries, guarded overwrites and unreadable registry files"""


class RegistryModule:
    """Manages the locked-threshold registry file"""

    def __init__(self, path: Union[str, Path] = DEFAULT_REGISTRY):
        self.path = Path(path)

    def _load(self) -> List[Dict]:
        if not self.path.exists():
            return []
        try:
            with open(self.path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise RegistryError(f"registry {self.path} is not valid JSON: {e}") from None
        entries = data.get('entries') if isinstance(data, dict) else None
        if not isinstance(entries, list):
            raise RegistryError(f"registry {self.path} has no 'entries' list")
        return entries

    def _save(self, entries: List[Dict]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(self.path.suffix + '.tmp')
        with open(tmp, 'w', encoding='utf-8') as f:
            json.dump({'entries': entries}, f, indent=2, sort_keys=True)
            f.write('\n')
        tmp.replace(self.path)

    @staticmethod
    def _to_locked(entry: Dict) -> LockedThreshold:
        try:
            return LockedThreshold(task=entry['task'], value=float(entry['value']),
                                   policy=ThresholdPolicy.from_dict(entry['policy']),
                                   source_cohort=entry.get('source_cohort', ''),
                                   locked_at=parser.isoparse(entry['locked_at']),
                                   selection_metrics=entry.get('selection_metrics', {}))
        except (KeyError, TypeError, ValueError) as e:
            raise RegistryError(f"malformed registry entry {entry}: {e}") from None

    def lock(self, locked: LockedThreshold, relock: bool = False) -> LockedThreshold:
        """Append a locked threshold; refuses to shadow an existing (task, band) unless relock"""
        entries = self._load()
        existing = [e for e in entries if e.get('task') == locked.task and e.get('band') == locked.band]
        if existing and not relock:
            raise RegistryError(f"threshold for task '{locked.task}' ({locked.band}) is already locked; "
                                "pass relock to supersede it")
        entries.append(locked.to_dict())
        self._save(entries)
        logger.info(f"Locked {locked.band} threshold {locked.value:.6g} for '{locked.task}' in {self.path}"
                    + (" (relock)" if existing else ""))
        return locked

    def get(self, task: str, band: str) -> LockedThreshold:
        """Latest entry for (task, band)"""
        for entry in reversed(self._load()):
            if entry.get('task') == task and entry.get('band') == band:
                return self._to_locked(entry)
        raise RegistryError(f"no locked {band} threshold for task '{task}' in {self.path}")

    def find(self, task: str, band: str) -> Optional[LockedThreshold]:
        try:
            return self.get(task, band)
        except RegistryError:
            return None

    def entries(self) -> List[LockedThreshold]:
        return [self._to_locked(e) for e in self._load()]
