"""``ka``: operator command line for a key authority repository.

Exit codes: 0 success, 1 domain error (label on stderr, or an error document
on stdout with ``--json``), 2 usage error.
"""

from __future__ import annotations

import argparse
import getpass
import json
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable

from . import errors, store
from .authority import Authority, read_repository_audit
from .control import DEFAULT_DUAL_CONTROL
from .crypto import KdfParams, SoftwareProvider

DEFAULT_REPO = "./ka-repo"
YEAR = 365 * 24 * 3600
WEEK = 7 * 24 * 3600


class Context:
    """Per-invocation state: the repository, the loaded authority, credentials."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.repo = store.Repository(args.repo)
        self._credentials: dict[str, str] | None = None
        self._ka: Authority | None = None

    def credential(self, operator_id: str, confirm: bool = False) -> str:
        if self.args.credential_file:
            if self._credentials is None:
                self._credentials = _read_credentials(self.args.credential_file)
            try:
                return self._credentials[operator_id]
            except KeyError:
                raise errors.AuthenticationFailed(f"no credential for {operator_id}") from None
        secret = getpass.getpass(f"passphrase for {operator_id}: ")
        if confirm and getpass.getpass(f"repeat passphrase for {operator_id}: ") != secret:
            raise errors.AuthenticationFailed("passphrases differ")
        return secret

    @property
    def ka(self) -> Authority:
        if self._ka is None:
            if not self.repo.exists():
                raise errors.NotFound(f"no key authority at {self.repo.root}; run ka init")
            self._ka = Authority.load(self.repo)
        return self._ka

    def sessions(self) -> list:
        return [self.ka.login(op, self.credential(op)) for op in dict.fromkeys(self.args.approver or ())]


def _read_credentials(path: str) -> dict[str, str]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise errors.UsageError(f"cannot read credential file: {exc}") from None
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise errors.UsageError("credential file must map operator ids to passphrases")
    return data


# command handlers return a document for stdout

def cmd_init(ctx: Context) -> dict:
    a = ctx.args
    if ctx.repo.exists():
        raise errors.AlreadyInitialized(str(ctx.repo.root))
    operators = {op: ctx.credential(op, confirm=True) for op in dict.fromkeys(a.operator)}
    provider = SoftwareProvider(kdf=KdfParams(a.kdf_log2n))
    dual = frozenset() if a.single_control else DEFAULT_DUAL_CONTROL
    ka = Authority.create(operators, authority_id=a.authority_id, repo=ctx.repo,
                          provider=provider, dual_control=dual)
    return {"authority_id": a.authority_id, "master_key_id": ka.master_key_id,
            "operators": sorted(operators)}


def cmd_operator_add(ctx: Context) -> dict:
    sessions = ctx.sessions()
    op = ctx.ka.add_operator(ctx.args.id, ctx.credential(ctx.args.id, confirm=True), sessions)
    return {"operator_id": op.operator_id, "active": op.active}


def cmd_issuer_create(ctx: Context) -> dict:
    issuer = ctx.ka.create_issuer(ctx.args.dn, ctx.args.id, approvals=ctx.sessions())
    return issuer.to_doc()


def cmd_issuer_rollover(ctx: Context) -> dict:
    issuer = ctx.ka.rollover_issuing_key(ctx.args.issuer, ctx.args.key, ctx.sessions(),
                                         effective=ctx.args.effective)
    return issuer.to_doc()


def cmd_participant_add(ctx: Context) -> dict:
    return ctx.ka.add_participant(ctx.args.name, ctx.args.id, approvals=ctx.sessions()).to_doc()


def cmd_keygen(ctx: Context) -> dict:
    a = ctx.args
    sessions = ctx.sessions()
    if a.owner:
        key_id, inst = ctx.ka.generate_participant_keys(a.issuer, a.owner, sessions, a.algorithm,
                                                        a.bits, a.provider)
    else:
        key_id, inst = ctx.ka.generate_issuer_key(a.issuer, sessions, a.algorithm, a.bits,
                                                  a.purpose, a.provider)
    return {"key_id": key_id, "instance_id": inst.instance_id, "state": inst.state.value}


def cmd_issue(ctx: Context) -> dict:
    a = ctx.args
    now = int(time.time())
    cert = ctx.ka.issue_certificate(a.issuer, a.subject, ctx.ka.public_key(a.key),
                                    now if a.valid_from is None else a.valid_from,
                                    (now + YEAR) if a.valid_to is None else a.valid_to,
                                    a.usage or ["digitalSignature"], ctx.sessions(),
                                    subject_dn=a.subject_dn)
    return {"cert_id": cert.cert_id, **cert.to_doc()}


def cmd_cross_issue(ctx: Context) -> dict:
    a = ctx.args
    now = int(time.time())
    cert = ctx.ka.issue_cross_certificate(a.signer, a.subject_issuer,
                                          now if a.valid_from is None else a.valid_from,
                                          (now + YEAR) if a.valid_to is None else a.valid_to,
                                          ctx.sessions())
    return {"cert_id": cert.cert_id, **cert.to_doc()}


def cmd_revoke(ctx: Context) -> dict:
    revoked = ctx.ka.revoke(ctx.args.issuer, ctx.args.serial, ctx.sessions(), ctx.args.reason)
    return {"issuer": ctx.args.issuer, "revoked": sorted(revoked)}


def cmd_crl_publish(ctx: Context) -> dict:
    a = ctx.args
    next_update = a.next_update if a.next_update is not None else int(time.time()) + WEEK
    crl = ctx.ka.publish_crl(a.issuer, next_update, ctx.sessions())
    return {"crl_id": crl.crl_id, **crl.to_doc()}


def cmd_personalize(ctx: Context) -> dict:
    a = ctx.args
    out = Path(a.out)
    # the passphrase exists only in this invocation's output, so never lose the PSE it opens
    if out.exists() or not out.parent.is_dir():
        raise errors.UsageError(f"{out} exists or its directory is missing")
    pse, passphrase = ctx.ka.personalize(a.instance, a.subject, ctx.sessions())
    fd = os.open(out, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(pse.to_bytes())
    inst = ctx.ka.instance(a.instance)
    return {"instance_id": inst.instance_id, "state": inst.state.value,
            "pse_id": pse.container_id, "pse_file": str(out), "passphrase": passphrase.secret}


def cmd_deliver(ctx: Context) -> dict:
    a = ctx.args
    inst = ctx.ka.record_delivery(a.instance, a.recipient, a.channel, ctx.sessions())
    return {"instance_id": inst.instance_id, "state": inst.state.value}


def cmd_deposit(ctx: Context) -> dict:
    record = ctx.ka.deposit_key(ctx.args.instance, ctx.args.purpose, ctx.sessions())
    return {"deposit_id": record.deposit_id, "key_id": record.key_id,
            "instance_id": record.instance_id, "purpose": record.purpose}


def cmd_recover(ctx: Context) -> dict:
    key_id, inst = ctx.ka.recover_key(ctx.args.deposit, ctx.sessions())
    return {"key_id": key_id, "instance_id": inst.instance_id, "state": inst.state.value}


def cmd_copy(ctx: Context) -> dict:
    inst = ctx.ka.copy_key(ctx.args.instance, ctx.sessions())
    return {"key_id": inst.key_id, "instance_id": inst.instance_id, "state": inst.state.value}


def cmd_destroy(ctx: Context) -> dict:
    inst = ctx.ka.destroy_key(ctx.args.instance, ctx.sessions())
    return {"instance_id": inst.instance_id, "state": inst.state.value, "retired": inst.retired}


def cmd_transfer_owner(ctx: Context) -> dict:
    own = ctx.ka.transfer_ownership(ctx.args.key, ctx.args.to, ctx.sessions())
    return {"key_id": own.key_id, "owner": own.owner, "since": own.since}


def cmd_verify_chain(ctx: Context) -> dict:
    return ctx.ka.verify_chain(ctx.args.leaf, ctx.args.anchor, ctx.args.at).to_doc()


def cmd_audit_verify(ctx: Context) -> dict:
    records, verdict = read_repository_audit(ctx.repo)
    doc = verdict.to_doc()
    if not verdict.valid:
        raise _Verdict(doc, errors.AuditChainBroken(f"{verdict.reason} at {verdict.broken_seq}"))
    return {**doc, "records": len(records)}


def cmd_show(ctx: Context) -> Any:
    if ctx.args.id is None:
        return {"kind": ctx.args.kind, "ids": ctx.ka.list_ids(ctx.args.kind)}
    return ctx.ka.describe(ctx.args.kind, ctx.args.id)


class _Verdict(Exception):
    """A negative verdict that is still printed as a document, with exit code 1."""

    def __init__(self, doc: dict, error: errors.KeyAuthorityError):
        super().__init__(str(error))
        self.doc = doc
        self.error = error


# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: UsageError: {message}\n")


def _approver(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--approver", action="append", metavar="OPERATOR", required=required,
                   help="operator approving this command; repeat for dual control")


def _add(sub, name: str, handler: Callable, help: str, approver: bool = True) -> argparse.ArgumentParser:
    p = sub.add_parser(name, help=help)
    p.set_defaults(handler=handler)
    if approver:
        _approver(p)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ka", description="Key authority operator tool")
    parser.add_argument("--repo", default=os.environ.get("KA_REPO", DEFAULT_REPO),
                        help="repository directory (env KA_REPO, default ./ka-repo)")
    parser.add_argument("--json", action="store_true", help="emit one canonical document")
    parser.add_argument("--credential-file", help="JSON map of operator id to passphrase")
    parser.add_argument("--wait", action="store_true",
                        help="queue behind another invocation instead of failing with RepoLocked")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = _add(sub, "init", cmd_init, "create a new key authority repository", approver=False)
    p.add_argument("--operator", action="append", required=True)
    p.add_argument("--authority-id", default="ka")
    p.add_argument("--kdf-log2n", type=int, default=KdfParams().log2n)
    p.add_argument("--single-control", action="store_true",
                   help="disable dual control (testing only)")

    op = sub.add_parser("operator", help="operator management").add_subparsers(
        dest="sub", required=True, parser_class=_Parser)
    p = _add(op, "add", cmd_operator_add, "add an operator")
    p.add_argument("--id", required=True)

    iss = sub.add_parser("issuer", help="issuer management").add_subparsers(
        dest="sub", required=True, parser_class=_Parser)
    p = _add(iss, "create", cmd_issuer_create, "register an issuer")
    p.add_argument("--dn", required=True)
    p.add_argument("--id")
    p = _add(iss, "rollover", cmd_issuer_rollover, "make a key the issuing key")
    p.add_argument("--issuer", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--effective", type=int)

    part = sub.add_parser("participant", help="participant management").add_subparsers(
        dest="sub", required=True, parser_class=_Parser)
    p = _add(part, "add", cmd_participant_add, "register a participant")
    p.add_argument("--name", required=True)
    p.add_argument("--id")

    p = _add(sub, "keygen", cmd_keygen, "generate a key pair")
    p.add_argument("--issuer", required=True, help="core authority generating the key")
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--owner", help="participant the key is generated for")
    who.add_argument("--for-issuer", action="store_true", help="the issuer's own key")
    p.add_argument("--purpose", default="issuing")
    p.add_argument("--algorithm", default="ed25519")
    p.add_argument("--bits", type=int)
    p.add_argument("--provider", default=SoftwareProvider.name, choices=["software", "token"])

    p = _add(sub, "issue", cmd_issue, "issue a certificate")
    p.add_argument("--issuer", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--key", required=True, help="key id whose public part is certified")
    p.add_argument("--subject-dn")
    p.add_argument("--valid-from", type=int)
    p.add_argument("--valid-to", type=int)
    p.add_argument("--usage", action="append")

    p = _add(sub, "cross-issue", cmd_cross_issue, "cross-certify another issuer")
    p.add_argument("--signer", required=True)
    p.add_argument("--subject-issuer", required=True)
    p.add_argument("--valid-from", type=int)
    p.add_argument("--valid-to", type=int)

    p = _add(sub, "revoke", cmd_revoke, "revoke a certificate")
    p.add_argument("--issuer", required=True)
    p.add_argument("--serial", type=int, required=True)
    p.add_argument("--reason", default="unspecified")

    crl = sub.add_parser("crl", help="revocation lists").add_subparsers(
        dest="sub", required=True, parser_class=_Parser)
    p = _add(crl, "publish", cmd_crl_publish, "sign and publish a CRL")
    p.add_argument("--issuer", required=True)
    p.add_argument("--next-update", type=int)

    p = _add(sub, "personalize", cmd_personalize, "seal a key into a PSE for its owner")
    p.add_argument("--instance", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True, help="file to write the PSE to")

    p = _add(sub, "deliver", cmd_deliver, "record delivery of a PSE")
    p.add_argument("--instance", required=True)
    p.add_argument("--recipient", required=True)
    p.add_argument("--channel", default="in-person")

    p = _add(sub, "deposit", cmd_deposit, "deposit a key for backup, archive or escrow")
    p.add_argument("--instance", required=True)
    p.add_argument("--purpose", default="Escrow", choices=["Backup", "Archive", "Escrow"])

    p = _add(sub, "recover", cmd_recover, "recover a deposited key")
    p.add_argument("--deposit", required=True)

    p = _add(sub, "copy", cmd_copy, "copy a key instance")
    p.add_argument("--instance", required=True)

    p = _add(sub, "destroy", cmd_destroy, "destroy a key instance")
    p.add_argument("--instance", required=True)

    p = _add(sub, "transfer-owner", cmd_transfer_owner, "transfer key ownership")
    p.add_argument("--key", required=True)
    p.add_argument("--to", required=True)

    p = _add(sub, "verify-chain", cmd_verify_chain, "validate a certification path", approver=False)
    p.add_argument("--leaf", required=True, help="certificate id")
    p.add_argument("--anchor", action="append", required=True, help="trusted issuer id")
    p.add_argument("--at", type=int)

    audit = sub.add_parser("audit", help="audit log").add_subparsers(
        dest="sub", required=True, parser_class=_Parser)
    _add(audit, "verify", cmd_audit_verify, "check the audit hash chain", approver=False)

    p = _add(sub, "show", cmd_show, "print one stored object, or list ids of a kind",
             approver=False)
    p.add_argument("kind", choices=["issuer", "participant", "key", "instance", "cert", "crl",
                                    "deposit", "pse", "operator", "audit", "config"])
    p.add_argument("id", nargs="?")
    return parser


# output

def _human(doc: Any) -> str:
    tree = json.loads(store.canonical_encode(doc))
    if isinstance(tree, dict):
        lines = []
        for k, v in tree.items():
            text = v if isinstance(v, str) else json.dumps(v, ensure_ascii=False)
            lines.append(f"{k}: {text}")
        return "\n".join(lines)
    return json.dumps(tree, ensure_ascii=False, indent=2)


def _emit(doc: Any, as_json: bool, stream=None) -> None:
    stream = stream or sys.stdout
    if as_json:
        stream.write(store.canonical_encode(doc).decode("utf-8") + "\n")
    else:
        stream.write(_human(doc) + "\n")
    stream.flush()


def _fail(err: errors.KeyAuthorityError, as_json: bool) -> int:
    if as_json:
        _emit({"error": err.label, "message": str(err)}, True)
    print(f"error: {err.label}: {err}", file=sys.stderr)
    return 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    ctx = Context(args)
    if args.command != "init" and not ctx.repo.exists():
        return _fail(errors.NotFound(f"no key authority at {ctx.repo.root}; run ka init"), args.json)
    try:
        with ctx.repo.lock(wait=args.wait):
            doc = args.handler(ctx)
    except _Verdict as v:
        if args.json:
            _emit(v.doc, True)
        print(f"error: {v.error.label}: {v.error}", file=sys.stderr)
        return 1
    except errors.UsageError as err:
        print(f"error: {err.label}: {err}", file=sys.stderr)
        return 2
    except errors.KeyAuthorityError as err:
        return _fail(err, args.json)
    except OSError as exc:
        return _fail(errors.IoFailure(str(exc)), args.json)
    except KeyboardInterrupt:
        return 2
    finally:
        if ctx._ka is not None:
            ctx._ka.lock()
    _emit(doc, args.json)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
