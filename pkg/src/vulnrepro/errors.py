"""Exception hierarchy shared across the pipeline."""


class VulnReproError(Exception):
    pass


class ParseError(VulnReproError):
    """A record or build file failed to parse.

    ``field`` names the offending schema field, ``line`` the 1-based line
    for text formats; either may be None.
    """

    def __init__(self, field=None, message="", line=None):
        self.field = field
        self.line = line
        where = field if field is not None else f"line {line}"
        super().__init__(f"{where}: {message}" if message else str(where))


class MissingPoC(ParseError):
    def __init__(self, message="issue record has no PoC reference"):
        super().__init__("poc", message)


class PocDigestMismatch(VulnReproError):
    pass


class MainProjectMissing(VulnReproError):
    pass


class UnsupportedVcs(VulnReproError):
    pass


class MissingSrcMap(VulnReproError):
    pass


class NoCommitBefore(VulnReproError):
    pass


class AmbiguousPin(VulnReproError):
    pass


class RuleApplicationError(VulnReproError):
    def __init__(self, rule_id, directive_index, reason=""):
        self.rule_id = rule_id
        self.directive_index = directive_index
        super().__init__(
            f"rule {rule_id!r} cannot be applied to directive {directive_index}"
            + (f": {reason}" if reason else "")
        )


class RunTimeout(VulnReproError):
    def __init__(self, seconds):
        self.seconds = seconds
        super().__init__(f"PoC run exceeded {seconds}s")


class PatchApplyError(VulnReproError):
    pass


class NoCandidates(VulnReproError):
    pass


class NonMonotone(VulnReproError):
    """Probe results contradict a single crash-to-clean transition."""

    def __init__(self, message, probed=None):
        self.probed = dict(probed or {})
        super().__init__(message)


class BundleIncomplete(VulnReproError):
    pass


class EmptyStats(VulnReproError):
    pass


class BackendUnavailable(VulnReproError, EnvironmentError):
    """Host lacks a tool the backend needs (VCS, compiler, container runtime)."""
