#!/usr/bin/python
# This file is part of brwmf.
#
# brwmf is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# brwmf is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.

DOCUMENTATION = """
---
module: brwmf_experiment
description:
  - Parses a branching random walk experiment config and, with state=run, runs it.
  - Returns the run manifest (checks, flagged points, output files).
  - Will be marked changed only when an experiment ran and wrote its outputs.
short_description: Runs or validates a brwmf experiment config.
version_added: "0.3"
options:
  config:
    description:
      - Path to the YAML experiment config.
    required: true
  state:
    description:
      - run executes the experiment, check only validates the config.
    required: false
    default: run
    choices: [ "run", "check" ]
  seed:
    description:
      - Overrides master_seed of the config.
    required: false
    default: None
  depth:
    description:
      - Overrides depth of the config.
    required: false
    default: None
  out:
    description:
      - Overrides the output directory of the config.
    required: false
    default: None
  parallelism:
    description:
      - Number of worker processes for the replicas. Outputs do not depend on it.
    required: false
    default: None
  fail_on_checks:
    description:
      - Fail the task when a check failed or the run was truncated.
    required: false
    default: true
"""

EXAMPLES = """
- name: validate a config
  brwmf_experiment: config=example-configs/binary-full.yml state=check

- name: run the martingale experiment on 4 workers
  brwmf_experiment:
    config: example-configs/binary-martingale.yml
    out: cache/dev/binary-martingale
    parallelism: 4
  register: martingale
"""

import json

from brwmf import output
from brwmf.config import parse_config
from brwmf.errors import BrwmfError, ConfigurationError
from brwmf.experiment import run_experiment


class ExperimentManager(object):

    def __init__(self, module, config, seed=None, depth=None, out=None, parallelism=None):
        self.module = module
        self.changed = False
        self.manifest = None
        self.config = parse_config(config, seed=seed, depth=depth, out=out, parallelism=parallelism)

    def ensure_ok(self):
        if self.module.check_mode:
            return
        manifest = run_experiment(self.config)
        # NaN and inf become null
        self.manifest = json.loads(output.dumps(manifest.as_dict()))
        self.changed = True

    def failed_checks(self):
        if self.manifest is None:
            return []
        return [c['name'] for c in self.manifest['checks'] if not c['passed']]

    def get_info(self):
        return dict(
            config_hash=self.config.config_hash(),
            kind=self.config.kind,
            output_dir=self.config.output,
            checks=list(self.config.checks),
            manifest=self.manifest,
        )


def main():

    module = AnsibleModule(
        argument_spec=dict(
            config=dict(type='path', required=True),
            state=dict(type='str', default='run', choices=['run', 'check']),
            seed=dict(type='int', default=None),
            depth=dict(type='int', default=None),
            out=dict(type='path', default=None),
            parallelism=dict(type='int', default=None),
            fail_on_checks=dict(type='bool', default=True),
        ),
        supports_check_mode=True,
    )

    state = module.params['state']
    fail_on_checks = module.params['fail_on_checks']

    try:
        manager = ExperimentManager(module, module.params['config'],
                                    seed=module.params['seed'],
                                    depth=module.params['depth'],
                                    out=module.params['out'],
                                    parallelism=module.params['parallelism'])
        if state == 'run':
            manager.ensure_ok()
    except ConfigurationError as e:
        module.fail_json(msg=str(e), key=e.key, line=e.line)
    except BrwmfError as e:
        module.fail_json(msg=str(e))

    result = dict(changed=manager.changed, **manager.get_info())
    if fail_on_checks and manager.manifest is not None:
        failed = manager.failed_checks()
        if failed or not manager.manifest['complete']:
            module.fail_json(msg="checks failed: %s%s" % (", ".join(failed) or "none",
                                                          "" if manager.manifest['complete'] else "; run incomplete"),
                             **result)

    module.exit_json(**result)


from ansible.module_utils.basic import AnsibleModule

if __name__ == '__main__':
    main()
