#!/usr/bin/python
# Jinja2 filters over brwmf run manifests (the `manifest` key returned by brwmf_experiment).


def _checks(manifest):
    if not manifest:
        return []
    return manifest.get('checks') or []


def failed_checks(manifest):
    return [c['name'] for c in _checks(manifest) if not c.get('passed')]


def check_summary(manifest):
    checks = _checks(manifest)
    return "%d/%d" % (sum(1 for c in checks if c.get('passed')), len(checks))


def flagged_points(manifest, where=None):
    """Flagged entries, optionally only those whose `where` starts with the given prefix."""
    flagged = (manifest or {}).get('flagged') or []
    if where is None:
        return flagged
    return [f for f in flagged if str(f.get('where', '')).startswith(where)]


class FilterModule(object):
    def filters(self):
        return {
            'failed_checks': failed_checks,
            'check_summary': check_summary,
            'flagged_points': flagged_points,
        }
