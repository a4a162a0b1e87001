import json

import pytest

from keyauthority.authority import Authority
from keyauthority.crypto import DeterministicRandom, KdfParams, SoftwareProvider
from keyauthority.store import Repository

# scrypt at 2**4 keeps the suite fast; cost is a parameter, not a behaviour
FAST_KDF = KdfParams(log2n=4)
OPERATORS = {"alice": "alice-passphrase-1", "bob": "bob-passphrase-22", "carol": "carol-pass-333"}
T0 = 1_700_000_000


class Clock:
    def __init__(self, t: int = T0):
        self.t = t

    def __call__(self) -> int:
        return self.t

    def advance(self, dt: int = 1) -> int:
        self.t += dt
        return self.t


def make_authority(tmp_path=None, clock=None, seed=None, **kw):
    clock = clock or Clock()
    rng = DeterministicRandom(seed) if seed is not None else None
    repo = Repository(tmp_path / "repo") if tmp_path is not None else None
    provider = SoftwareProvider(kdf=FAST_KDF, rng=rng)
    ka = Authority.create(OPERATORS, repo=repo, provider=provider, clock=clock, **kw)
    return ka, clock


class Env:
    """An authority with all operators logged in and one active issuer."""

    def __init__(self, ka, clock, issuer_dn="CN=Root CA", issuer_id="root"):
        self.ka = ka
        self.clock = clock
        self.a = ka.login("alice", OPERATORS["alice"])
        self.b = ka.login("bob", OPERATORS["bob"])
        self.one = [self.a]
        self.two = [self.a, self.b]
        if issuer_id:
            self.add_issuer(issuer_dn, issuer_id)

    def add_issuer(self, dn, issuer_id, effective=None):
        self.ka.create_issuer(dn, issuer_id, approvals=self.one)
        key_id, _ = self.ka.generate_issuer_key(issuer_id, self.two)
        self.ka.rollover_issuing_key(issuer_id, key_id, self.two,
                                     effective=self.clock() if effective is None else effective)
        return key_id

    def participant(self, pid):
        if pid not in self.ka.registry.participants:
            self.ka.add_participant(pid.title(), pid, self.one)
        return pid

    def participant_key(self, owner="pat", issuer="root", **kw):
        self.participant(owner)
        return self.ka.generate_participant_keys(issuer, owner, self.one, **kw)


@pytest.fixture
def clock():
    return Clock()


@pytest.fixture
def env(tmp_path):
    ka, clock = make_authority(tmp_path)
    return Env(ka, clock)


@pytest.fixture
def mem_env():
    ka, clock = make_authority(None)
    return Env(ka, clock)


@pytest.fixture
def creds(tmp_path):
    path = tmp_path / "creds.json"
    path.write_text(json.dumps(OPERATORS))
    return path


# acceptance reporting: one PASS/FAIL line per criterion, printed after the run

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    previous = _criteria.get(number)
    if previous is None or previous[1] == "PASS":
        _criteria[number] = (title, outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {outcome}  {title}")
