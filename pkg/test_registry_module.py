import json
import math
from datetime import datetime, timezone

import pytest

from policy_module import RULEIN, RULEOUT, LockedThreshold, RuleInPpv, RuleOutNpv
from registry_module import RegistryError, RegistryModule


def locked(value, task='frozen_section', rule=None, day=12):
    return LockedThreshold(task=task, value=value, policy=rule or RuleOutNpv(min_npv=0.98),
                           source_cohort='internal', locked_at=datetime(2024, 2, day, 9, 30, tzinfo=timezone.utc),
                           selection_metrics={'npv': 0.99, 'threshold': value})


@pytest.fixture
def registry(tmp_path):
    return RegistryModule(tmp_path / 'locked_thresholds.json')


def test_lock_then_get(registry):
    entry = locked(0.961)
    registry.lock(entry)
    stored = registry.get('frozen_section', RULEOUT)
    assert stored == entry
    assert stored.locked_at == entry.locked_at
    assert stored.selection_metrics == {'npv': 0.99, 'threshold': 0.961}


def test_relock_is_explicit(registry):
    registry.lock(locked(0.961))
    with pytest.raises(RegistryError, match='already locked'):
        registry.lock(locked(0.5))
    registry.lock(locked(0.5, day=13), relock=True)
    assert registry.get('frozen_section', RULEOUT).value == 0.5
    # append-only: the superseded entry stays on file
    assert [e.value for e in registry.entries()] == [0.961, 0.5]


def test_bands_and_tasks_are_independent(registry):
    registry.lock(locked(0.2))
    registry.lock(locked(0.9, rule=RuleInPpv(min_ppv=0.95)))
    registry.lock(locked(0.3, task='ihc'))
    assert registry.get('frozen_section', RULEIN).value == 0.9
    assert registry.get('ihc', RULEOUT).value == 0.3


def test_missing_entry(registry):
    with pytest.raises(RegistryError, match='no locked'):
        registry.get('frozen_section', RULEOUT)
    assert registry.find('frozen_section', RULEOUT) is None


def test_infinite_threshold_survives(registry):
    registry.lock(locked(math.inf))
    assert registry.get('frozen_section', RULEOUT).value == math.inf


@pytest.mark.parametrize('content', ['{not json', '{"items": []}', '{"entries": [{"task": "x"}]}'])
def test_unreadable_registry(registry, content):
    registry.path.write_text(content)
    with pytest.raises(RegistryError):
        registry.entries()


def test_file_is_canonical_json(registry):
    registry.lock(locked(0.961))
    data = json.loads(registry.path.read_text())
    entry = data['entries'][0]
    assert entry['band'] == RULEOUT
    assert entry['policy'] == {'kind': 'rule_out_npv', 'min_npv': 0.98, 'pick_rule': 'largest'}
    assert entry['locked_at'] == '2024-02-12T09:30:00+00:00'
