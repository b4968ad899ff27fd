"""
Experiment configuration files.

A config is a YAML mapping checked against ARGUMENT_SPEC, an Ansible module
argument_spec run through ansible's ArgumentSpecValidator: types, required
keys, defaults, choices and nested options come from there. Unknown keys,
missing required keys, type mismatches and the domain constraints checked
here all raise ConfigurationError naming the dotted key and its line in the
file.
"""

import copy
import hashlib
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
import simplejson as json
import yaml
from ansible.module_utils.common.arg_spec import ArgumentSpecValidator
from ansible.module_utils.errors import UnsupportedError

from brwmf import model, pressure, tree
from brwmf.errors import ConfigurationError

log = logging.getLogger(__name__)

KINDS = ['domains', 'pressure', 'cascade', 'spectrum', 'full']

KIND_CHECKS = {
    'domains': ['legendre_duality', 'gradient_roundtrip', 'j_boundary', 'phi_lemma'],
    'pressure': ['pressure_convergence', 'pressure_upper_bound', 'martingale_mean'],
    'cascade': ['exact_identities', 'l_n_convergence', 'l_n_improves', 'z_n_identity',
                'local_dimension', 'prefix_cascade', 'concentration'],
    'spectrum': ['ldp_slope', 'local_dimension', 'spectrum_agreement', 'spectrum_upper_bound',
                 'estimator_agreement'],
}
_full = []
for _kind in ('domains', 'pressure', 'cascade', 'spectrum'):
    _full.extend(c for c in KIND_CHECKS[_kind] if c not in _full)
KIND_CHECKS['full'] = _full
CHECKS = KIND_CHECKS['full']

GRID_OPTIONS = dict(
    lower=dict(type='list', elements='float', required=True),
    upper=dict(type='list', elements='float', required=True),
    points=dict(type='list', elements='int', required=True),
)

ALPHA_OPTIONS = dict(
    lower=dict(type='list', elements='float'),
    upper=dict(type='list', elements='float'),
    points=dict(type='list', elements='int'),
    values=dict(type='list', elements='raw'),
)

MODEL_OPTIONS = {
    'family': dict(type='str', required=True, choices=[f.value for f in model.Family]),
    'd': dict(type='int'),
    'fan_out': dict(type='int'),
    'lambda': dict(type='float'),
    'mean': dict(type='list', elements='float'),
    'sigma': dict(type='float'),
    'support': dict(type='list', elements='raw'),
    'probabilities': dict(type='list', elements='float'),
}

FAMILY_KEYS = {
    model.Family.BINARY_RADEMACHER: ('d',),
    model.Family.FIXED_FAN_DISCRETE: ('d', 'fan_out', 'support', 'probabilities'),
    model.Family.SHIFTED_POISSON_GAUSSIAN: ('d', 'lambda', 'mean', 'sigma'),
}

TOLERANCE_OPTIONS = dict(
    solver=dict(type='float', default=1e-10),
    identities=dict(type='float', default=1e-12),
    martingale_sigmas=dict(type='float', default=3.0),
    pressure=dict(type='float', default=0.05),
    pressure_slack=dict(type='float', default=0.1),
    duality=dict(type='float', default=1e-8),
    roundtrip=dict(type='float', default=1e-6),
    l_n=dict(type='float', default=0.05),
    spectrum=dict(type='float', default=0.1),
    local_dimension=dict(type='float', default=0.1),
    prefix=dict(type='float', default=0.1),
    concentration=dict(type='float', default=0.1),
    agreement=dict(type='float', default=0.15),
    growth=dict(type='float', default=0.05),
)

ARGUMENT_SPEC = dict(
    kind=dict(type='str', required=True, choices=KINDS),
    model=dict(type='dict', required=True, options=MODEL_OPTIONS),
    depth=dict(type='int', required=True),
    replicas=dict(type='int', default=1),
    master_seed=dict(type='int', default=0),
    q_grid=dict(type='dict', required=True, options=GRID_OPTIONS),
    cascade_grid=dict(type='dict', options=GRID_OPTIONS),
    lambda_grid=dict(type='dict', options=GRID_OPTIONS),
    alpha_grid=dict(type='dict', options=ALPHA_OPTIONS),
    epsilons=dict(type='list', elements='float', default=[0.05, 0.025, 0.1]),
    tolerances=dict(type='dict', options=TOLERANCE_OPTIONS, apply_defaults=True),
    output=dict(type='path', default='out'),
    parallelism=dict(type='int', default=1),
    node_budget=dict(type='int', default=tree.DEFAULT_NODE_BUDGET),
    paths=dict(type='int', default=100),
    n_range=dict(type='list', elements='int'),
    compare_depth=dict(type='int'),
    bound_from_level=dict(type='int', default=15),
    gamma_probe=dict(type='list', elements='float', default=list(pressure.DEFAULT_GAMMA_PROBE)),
    rate_radius=dict(type='float', default=0.2),
    p_resolution=dict(type='float', default=1e-3),
    checks=dict(type='list', elements='str', choices=CHECKS),
)

# keys that never change what a run computes
HASH_EXCLUDED = ('output', 'parallelism')


def _join(prefix, name):
    return "%s.%s" % (prefix, name) if prefix else str(name)


def _line_map(node, prefix=""):
    """1-based line of every key and list item, keyed by dotted path."""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            key = _join(prefix, key_node.value)
            lines[key] = key_node.start_mark.line + 1
            lines.update(_line_map(value_node, key))
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            key = "%s[%d]" % (prefix, i)
            lines[key] = item.start_mark.line + 1
            lines.update(_line_map(item, key))
    return lines


def _line_for(lines, key):
    while key:
        if key in lines:
            return lines[key]
        key = key.rpartition('.')[0]
    return None


_ERROR_PARAM = (
    re.compile(r"^missing required arguments: ([^ ,]+)"),
    re.compile(r"^argument '([^']+)'"),
    re.compile(r"^Elements value for option '([^']+)'"),
    re.compile(r"^value of ([^ ]+) must be"),
)
_ERROR_CONTEXT = re.compile(r"found in '?(\w+(?: -> \w+)*)")


def _error_key(error):
    """Dotted config key named by an ansible validation error."""
    msg = error.msg
    if isinstance(error, UnsupportedError):
        return msg.split('. Supported parameters')[0].split(', ')[0]
    for pattern in _ERROR_PARAM:
        match = pattern.search(msg)
        if match:
            context = _ERROR_CONTEXT.search(msg)
            prefix = '.'.join(context.group(1).split(' -> ')) if context else ''
            return _join(prefix, match.group(1))
    return 'config'


def check_options(argument_spec, data, lines=None):
    """Validates data against an argument_spec; returns it with defaults filled in.

    The first validation error becomes a ConfigurationError carrying the
    offending key and its line.
    """
    lines = lines or {}
    result = ArgumentSpecValidator(argument_spec).validate(data)
    if result.error_messages:
        error = result.errors.errors[0]
        key = _error_key(error)
        raise ConfigurationError(key, error.msg, _line_for(lines, key))
    return copy.deepcopy(result.validated_parameters)


def _tuple(values):
    return None if values is None else tuple(values)


@dataclass(frozen=True)
class GridBlock:
    lower: tuple
    upper: tuple
    points: tuple

    def qgrid(self):
        return pressure.QGrid.box(self.lower, self.upper, self.points)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    model: dict
    depth: int
    replicas: int
    master_seed: int
    q_grid: GridBlock
    cascade_grid: GridBlock
    lambda_grid: GridBlock
    alpha_values: tuple
    epsilons: tuple
    tolerances: dict
    output: str
    parallelism: int
    node_budget: int
    paths: int
    n_range: tuple
    compare_depth: int
    bound_from_level: int
    gamma_probe: tuple
    rate_radius: float
    p_resolution: float
    checks: tuple
    path: str = None
    source: dict = field(default=None, repr=False, compare=False)
    lines: dict = field(default=None, repr=False, compare=False)

    @property
    def d(self):
        return self.model_spec().d

    @property
    def primary_epsilon(self):
        return self.epsilons[0]

    def model_spec(self):
        return build_model(self.model, self.lines or {})

    def qgrid(self):
        return self.q_grid.qgrid()

    def cascade_qgrid(self):
        return self.cascade_grid.qgrid()

    def lambda_qgrid(self):
        return self.lambda_grid.qgrid()

    def alphas(self):
        return np.asarray(self.alpha_values, dtype=float).reshape(-1, self.d)

    def canonical(self):
        """Effective configuration with every default resolved, as plain JSON types."""
        data = dict(
            kind=self.kind,
            model=dict(self.model),
            depth=self.depth,
            replicas=self.replicas,
            master_seed=self.master_seed,
            q_grid=_grid_dict(self.q_grid),
            cascade_grid=_grid_dict(self.cascade_grid),
            lambda_grid=_grid_dict(self.lambda_grid),
            alpha_values=[list(a) for a in self.alpha_values],
            epsilons=list(self.epsilons),
            tolerances=dict(self.tolerances),
            output=self.output,
            parallelism=self.parallelism,
            node_budget=self.node_budget,
            paths=self.paths,
            n_range=list(self.n_range),
            compare_depth=self.compare_depth,
            bound_from_level=self.bound_from_level,
            gamma_probe=list(self.gamma_probe),
            rate_radius=self.rate_radius,
            p_resolution=self.p_resolution,
            checks=list(self.checks),
        )
        return data

    def config_hash(self):
        data = self.canonical()
        for key in HASH_EXCLUDED:
            data.pop(key)
        text = json.dumps(data, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    def with_overrides(self, seed=None, depth=None, out=None, parallelism=None):
        """Re-validates the source document with command-line overrides applied."""
        source = copy.deepcopy(self.source)
        for key, value in (('master_seed', seed), ('depth', depth), ('output', out),
                           ('parallelism', parallelism)):
            if value is not None:
                source[key] = value
        return from_data(source, self.lines, self.path)


def _grid_dict(block):
    return dict(lower=list(block.lower), upper=list(block.upper), points=list(block.points))


def build_model(block, lines=None):
    """ModelSpec from a validated model block; errors carry the block's line numbers."""
    lines = lines or {}
    family = model.Family(block['family'])
    for name in MODEL_OPTIONS:
        if name != 'family' and block.get(name) is not None and name not in FAMILY_KEYS[family]:
            key = 'model.' + name
            raise ConfigurationError(key, "not a parameter of %s" % family.value, _line_for(lines, key))
    try:
        if family is model.Family.BINARY_RADEMACHER:
            return model.ModelSpec.binary_rademacher(block.get('d') or 1)
        if family is model.Family.FIXED_FAN_DISCRETE:
            for name in ('support', 'probabilities'):
                if block.get(name) is None:
                    raise ConfigurationError('model.' + name, "required for %s" % family.value)
            fan_out = block['fan_out'] if block.get('fan_out') is not None else 2
            spec = model.ModelSpec.fixed_fan_discrete(fan_out, block['support'], block['probabilities'])
            if block.get('d') is not None and block['d'] != spec.d:
                raise ConfigurationError('model.d', "support points have %d coordinates" % spec.d)
            return spec
        d = block.get('d') or (len(block['mean']) if block.get('mean') else 1)
        mean = block['mean'] if block.get('mean') is not None else [0.0] * d
        if len(mean) != d:
            raise ConfigurationError('model.mean', "mean needs %d coordinates" % d)
        rate = block['lambda'] if block.get('lambda') is not None else 1.0
        sigma = block['sigma'] if block.get('sigma') is not None else 1.0
        return model.ModelSpec.shifted_poisson_gaussian(rate, mean, sigma)
    except ConfigurationError as e:
        if e.line is not None:
            raise
        raise ConfigurationError(e.key, e.msg, _line_for(lines, e.key))
    except (TypeError, ValueError) as e:
        raise ConfigurationError('model', str(e), _line_for(lines, 'model'))


def _grid_block(data, key, d, lines):
    line = _line_for(lines, key)
    lower, upper, points = data['lower'], data['upper'], data['points']
    if len(points) == 1 and d > 1:
        points = points * d
    for name, values in (('lower', lower), ('upper', upper), ('points', points)):
        if len(values) != d:
            raise ConfigurationError("%s.%s" % (key, name), "needs %d coordinates" % d,
                                     _line_for(lines, "%s.%s" % (key, name)))
    if any(p < 1 for p in points):
        raise ConfigurationError(key + '.points', "every axis needs at least one point",
                                 _line_for(lines, key + '.points'))
    if any(hi < lo for lo, hi in zip(lower, upper)):
        raise ConfigurationError(key + '.upper', "upper bound below lower bound",
                                 _line_for(lines, key + '.upper') or line)
    return GridBlock(lower=tuple(lower), upper=tuple(upper), points=tuple(points))


def _alpha_values(data, d, lines):
    if data is None:
        return ()
    values = []
    if data.get('values') is not None:
        for i, raw in enumerate(data['values']):
            key = 'alpha_grid.values[%d]' % i
            try:
                point = [float(x) for x in np.atleast_1d(raw)]
            except (TypeError, ValueError):
                raise ConfigurationError(key, "expected a number or a list of numbers", _line_for(lines, key))
            if len(point) != d:
                raise ConfigurationError(key, "needs %d coordinates" % d, _line_for(lines, key))
            values.append(tuple(point))
    box = [data.get(k) for k in ('lower', 'upper', 'points')]
    if any(v is not None for v in box):
        if any(v is None for v in box):
            raise ConfigurationError('alpha_grid', "a box needs lower, upper and points",
                                     _line_for(lines, 'alpha_grid'))
        block = _grid_block(dict(lower=box[0], upper=box[1], points=box[2]), 'alpha_grid', d, lines)
        values.extend(tuple(float(x) for x in row) for row in block.qgrid().points)
    if not values:
        raise ConfigurationError('alpha_grid', "grid is empty", _line_for(lines, 'alpha_grid'))
    return tuple(values)


def _positive(value, key, lines, strict=True):
    if (value <= 0) if strict else (value < 0):
        raise ConfigurationError(key, "must be %s, got %r" % ("> 0" if strict else ">= 0", value),
                                 _line_for(lines, key))


def default_checks(kind, spec, replicas):
    checks = list(KIND_CHECKS[kind])
    if spec.family is not model.Family.SHIFTED_POISSON_GAUSSIAN and 'j_boundary' in checks:
        checks.remove('j_boundary')
    if replicas < 2 and 'martingale_mean' in checks:
        checks.remove('martingale_mean')
    return checks


def from_data(source, lines=None, path=None):
    """ExperimentConfig from an already loaded YAML document."""
    lines = lines or {}
    params = check_options(ARGUMENT_SPEC, source, lines)
    spec = build_model(params['model'], lines)
    d = spec.d

    depth = params['depth']
    if depth < 1:
        raise ConfigurationError('depth', "depth must be >= 1, got %d" % depth, _line_for(lines, 'depth'))
    if params['replicas'] < 1:
        raise ConfigurationError('replicas', "replicas must be >= 1", _line_for(lines, 'replicas'))
    if not 0 <= params['master_seed'] < 2 ** 64:
        raise ConfigurationError('master_seed', "seed must be a 64-bit unsigned integer",
                                 _line_for(lines, 'master_seed'))
    for key in ('parallelism', 'node_budget', 'paths', 'bound_from_level', 'rate_radius'):
        _positive(params[key], key, lines)
    if not 0.0 < params['p_resolution'] < 1.0:
        raise ConfigurationError('p_resolution', "must lie in (0, 1)", _line_for(lines, 'p_resolution'))

    epsilons = params['epsilons']
    if not epsilons:
        raise ConfigurationError('epsilons', "at least one epsilon is required", _line_for(lines, 'epsilons'))
    for i, eps in enumerate(epsilons):
        _positive(eps, 'epsilons[%d]' % i, lines)

    for name, value in params['tolerances'].items():
        _positive(value, 'tolerances.' + name, lines)
    for i, gamma in enumerate(params['gamma_probe']):
        if not 1.0 < gamma <= 2.0:
            key = 'gamma_probe[%d]' % i
            raise ConfigurationError(key, "gamma must lie in (1, 2], got %r" % gamma, _line_for(lines, key))

    q_grid = _grid_block(params['q_grid'], 'q_grid', d, lines)
    q_grid.qgrid()
    cascade_grid = _grid_block(params['cascade_grid'], 'cascade_grid', d, lines) \
        if params['cascade_grid'] is not None else q_grid
    lambda_grid = _grid_block(params['lambda_grid'], 'lambda_grid', d, lines) \
        if params['lambda_grid'] is not None else GridBlock((-0.2,) * d, (0.2,) * d, (5,) * d)

    n_range = params['n_range']
    if n_range is None:
        n_range = [max(1, depth - 8), depth]
    if len(n_range) != 2 or not 1 <= n_range[0] <= n_range[1] <= depth:
        raise ConfigurationError('n_range', "needs two levels 1 <= low <= high <= depth",
                                 _line_for(lines, 'n_range'))
    compare_depth = params['compare_depth']
    if compare_depth is None:
        compare_depth = max(1, depth // 2)
    if not 1 <= compare_depth <= depth:
        raise ConfigurationError('compare_depth', "must lie in 1..depth", _line_for(lines, 'compare_depth'))

    checks = params['checks']
    if checks is None:
        checks = default_checks(params['kind'], spec, params['replicas'])
    else:
        for i, name in enumerate(checks):
            key = 'checks[%d]' % i
            if name not in KIND_CHECKS[params['kind']]:
                raise ConfigurationError(key, "check %s does not apply to kind %s" % (name, params['kind']),
                                         _line_for(lines, key))
            if name == 'j_boundary' and spec.family is not model.Family.SHIFTED_POISSON_GAUSSIAN:
                raise ConfigurationError(key, "j_boundary needs a ShiftedPoissonGaussian model",
                                         _line_for(lines, key))

    return ExperimentConfig(
        kind=params['kind'],
        model=spec.as_dict(),
        depth=depth,
        replicas=params['replicas'],
        master_seed=params['master_seed'],
        q_grid=q_grid,
        cascade_grid=cascade_grid,
        lambda_grid=lambda_grid,
        alpha_values=_alpha_values(params['alpha_grid'], d, lines),
        epsilons=tuple(epsilons),
        tolerances=params['tolerances'],
        output=params['output'],
        parallelism=params['parallelism'],
        node_budget=params['node_budget'],
        paths=params['paths'],
        n_range=tuple(n_range),
        compare_depth=compare_depth,
        bound_from_level=params['bound_from_level'],
        gamma_probe=tuple(params['gamma_probe']),
        rate_radius=params['rate_radius'],
        p_resolution=params['p_resolution'],
        checks=tuple(checks),
        path=path,
        source=source,
        lines=lines,
    )


def loads(text, path=None):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        source = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark is not None else None
        raise ConfigurationError('config', str(e.problem), line)
    if not isinstance(source, dict):
        raise ConfigurationError('config', "top level must be a mapping", 1)
    return from_data(source, _line_map(node), path)


def parse_config(path, **overrides):
    """Strict parse of a YAML experiment config, overrides applied last."""
    if not os.path.isfile(path):
        raise ConfigurationError('config', "no such file: %s" % path)
    with open(path) as f:
        config = loads(f.read(), path)
    if any(v is not None for v in overrides.values()):
        config = config.with_overrides(**overrides)
    log.debug("parsed %s: kind=%s hash=%s", path, config.kind, config.config_hash())
    return config
