import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from moesim import ExpertCache, Precision
from moesim.cache import OutcomeKind
from moesim.errors import CapacityError, NotCachedError

from oracles import HIGH, LOW, NaiveCacheFull, NaiveLRU

H, LO = Precision.HIGH, Precision.LOW


def _cache(capacity, high=40, low=20):
    return ExpertCache(capacity, {H: high, LO: low})


def test_cold_miss():
    out = _cache(100).lookup((0, 0), LO)
    assert out.kind is OutcomeKind.MISS_LOAD and out.precision is LO and not out.is_hit


def test_lru_eviction_example():
    c = _cache(100)
    c.insert((0, 0), H, now=1)  # A
    c.insert((0, 1), H, now=2)  # B
    assert c.insert((0, 2), H, now=3) == [(0, 0)]
    assert [e.key for e in c.snapshot()] == [(0, 1), (0, 2)]


def test_promotion_replaces_self_only():
    c = _cache(100)
    c.insert((3, 1), LO)
    c.insert((0, 0), H)
    assert c.insert((3, 1), H) == [(3, 1)]
    assert c.cached_precision((3, 1)) is H and len(c) == 2 and c.used == 80


def test_same_precision_reinsert_is_touch():
    c = _cache(100)
    c.insert((0, 0), H)
    c.insert((0, 1), H)
    assert c.insert((0, 0), H) == []
    assert [e.key for e in c.snapshot()] == [(0, 1), (0, 0)]


def test_pin_blocks_eviction():
    c = ExpertCache(100, {H: 60, LO: 50})
    c.insert((0, 0), H)
    c.pin((0, 0))
    before = c.snapshot()
    with pytest.raises(CapacityError):
        c.insert((0, 1), LO)
    assert c.snapshot() == before and c.used == 60  # atomic failure
    c.unpin((0, 0))
    assert c.insert((0, 1), LO) == [(0, 0)]


def test_pin_skipped_lru_victim():
    c = _cache(100)
    c.insert((0, 0), H)
    c.insert((0, 1), H)
    c.pin((0, 0))
    assert c.insert((0, 2), H) == [(0, 1)]


def test_pin_counts_nest():
    c = _cache(100)
    c.insert((0, 0), H)
    c.pin((0, 0))
    c.pin((0, 0))
    c.unpin((0, 0))
    assert c.snapshot()[0].pinned
    c.unpin((0, 0))
    assert not c.snapshot()[0].pinned
    with pytest.raises(ValueError):
        c.unpin((0, 0))


def test_pin_absent_key():
    c = _cache(100)
    with pytest.raises(NotCachedError):
        c.pin((1, 1))
    with pytest.raises(NotCachedError):
        c.unpin((1, 1))


def test_oversized_entry():
    with pytest.raises(CapacityError):
        _cache(30).insert((0, 0), H)


def test_skip_rejected():
    c = _cache(100)
    with pytest.raises(ValueError):
        c.insert((0, 0), Precision.SKIP)
    with pytest.raises(ValueError):
        c.lookup((0, 0), Precision.SKIP)


def test_snapshot_order_after_hits():
    c = _cache(200)
    assert c.snapshot() == []
    for e in range(4):
        c.insert((0, e), H)
    c.lookup((0, 1), H)
    c.lookup((0, 0), LO)  # conservative reuse also refreshes recency
    assert [e.key.expert for e in c.snapshot()] == [2, 3, 1, 0]


def test_conservative_reuse_no_io_and_promotion_never_hit():
    c = _cache(100)
    c.insert((0, 0), H)
    c.insert((0, 1), LO)
    used = c.used
    assert c.lookup((0, 0), LO).is_hit and c.used == used
    assert not c.lookup((0, 1), H).is_hit
    assert c.cached_precision((0, 1)) is LO  # low copy stays until the high one lands


def test_pinned_replacement_keeps_pins():
    c = _cache(100)
    c.insert((0, 0), LO)
    c.pin((0, 0))
    c.insert((0, 0), H)
    assert c.snapshot()[0].pins == 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.lists(st.tuples(st.booleans(), st.integers(0, 5)), max_size=60))
def test_textbook_lru_equivalence(capacity, ops):
    """Single precision, no pins: identical to an item-count LRU."""
    c = _cache(capacity * 40)
    lru = []  # textbook list, MRU at the end
    for is_insert, e in ops:
        key = (0, e)
        if is_insert:
            exp = []
            if key in lru:
                lru.remove(key)
            elif len(lru) == capacity:
                exp = [lru.pop(0)]
            lru.append(key)
            assert c.insert(key, H) == exp
        else:
            hit = c.lookup(key, H).is_hit
            assert hit == (key in lru)
            if hit:
                lru.remove(key)
                lru.append(key)
        assert [x.key for x in c.snapshot()] == lru


class CacheMachine(RuleBasedStateMachine):
    """Random operation sequences against the naive list oracle."""

    keys = st.tuples(st.integers(0, 2), st.integers(0, 2))
    precs = st.sampled_from([HIGH, LOW])

    def __init__(self):
        super().__init__()
        self.cap = 10
        self.real = ExpertCache(self.cap, {H: 4, LO: 2})
        self.ref = NaiveLRU(self.cap, {HIGH: 4, LOW: 2})
        self.pins = {}

    @rule(key=keys, prec=precs)
    def lookup(self, key, prec):
        got = self.real.lookup(key, Precision(prec))
        assert (got.kind.value, got.precision.value) == self.ref.lookup(key, prec)

    @rule(key=keys, prec=precs)
    def insert(self, key, prec):
        try:
            got = self.real.insert(key, Precision(prec))
        except CapacityError:
            got = None
        try:
            exp = self.ref.insert(key, prec)
        except NaiveCacheFull:
            exp = None
        assert got == exp

    @precondition(lambda self: len(self.real) > 0)
    @rule(data=st.data())
    def pin(self, data):
        key = data.draw(st.sampled_from([tuple(e.key) for e in self.real.snapshot()]))
        self.real.pin(key)
        self.ref.pin(key)
        self.pins[key] = self.pins.get(key, 0) + 1

    @precondition(lambda self: any(v > 0 for v in self.pins.values()))
    @rule(data=st.data())
    def unpin(self, data):
        key = data.draw(st.sampled_from(sorted(k for k, v in self.pins.items() if v > 0)))
        self.real.unpin(key)
        self.ref.unpin(key)
        self.pins[key] -= 1

    @invariant()
    def agree(self):
        snap = [(tuple(e.key), e.precision.value, e.bytes, e.pins) for e in self.real.snapshot()]
        assert snap == self.ref.state()
        assert self.real.used == sum(e[2] for e in snap) <= self.cap
        assert len({e[0] for e in snap}) == len(snap)  # no duplication
        # reference-count oracle: pins on a cached key equal pins minus unpins
        for k, _, _, pins in snap:
            assert pins == self.pins.get(k, 0)


CacheMachine.TestCase.settings = settings(max_examples=150, stateful_step_count=40, deadline=None)
TestCacheMachine = CacheMachine.TestCase
