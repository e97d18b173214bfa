# seka: spectral key editing for attention steering.
#
# Copyright (C) 2026 The seka developers
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.
#
# Default run configuration keys; a --config YAML file overrides these and
# command line flags override both.  gamma, delta_min and the gains have no
# defaults and must always be given explicitly.

run_config_kv = dict(
    seed=42,
    n=100,
    K=5,
    repeat=10,
    g_neg=0.0,
    alpha=100.0,
    suite='all',
    log_level='WARNING',
    gamma=None,
    delta_min=None,
    g_pos=None,
    g=None,
)

# Reference hyperparameters reported for pretrained backbones; documentation
# only, never applied implicitly.
reference_kv = dict(
    gamma=(0.70, 0.998),
    delta_min=(0.0, 0.6),
    g_pos=(-0.5, 2.42),
    g_neg=(0.0, 0.8),
    g=(-5.0, 3.0),
    K=5,
)
