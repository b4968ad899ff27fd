"""
Exceptions raised by brwmf.

Numerical non-convergence is not an error here: solvers and estimators
return it as flags on their result records.
"""


class BrwmfError(Exception):
    pass


class ConfigurationError(BrwmfError, ValueError):
    """Invalid model or experiment configuration.

    key names the offending parameter (dotted path for nested config
    blocks), line is the 1-based line in the config file when known.
    """

    def __init__(self, key, msg, line=None):
        self.key = key
        self.msg = msg
        self.line = line
        if line is not None:
            text = "%s (line %d): %s" % (key, line, msg)
        else:
            text = "%s: %s" % (key, msg)
        super(ConfigurationError, self).__init__(text)


class NodeBudgetExceeded(BrwmfError):
    def __init__(self, level, node_count, budget):
        self.level = level
        self.node_count = node_count
        self.budget = budget
        super(NodeBudgetExceeded, self).__init__(
            "level %d would hold %d nodes, budget is %d" % (level, node_count, budget))


class UsageError(BrwmfError):
    pass


class InfeasibleGridError(BrwmfError):
    pass
