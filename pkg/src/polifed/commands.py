"""Default trusted commands for federated training.

Local commands run on edge nodes against user data; global ones run on the
coordinator. Budget checks are obligations: a policy can demand them before
``return`` and the coordinator discharges them per privacy group.
"""

from __future__ import annotations

from typing import Mapping

from .accountant import BudgetExceeded, enforce_dp_budget
from .data import Geofence, UserDataset, filter_columns, in_geofence_cond
from .fl import ModelParams, accumulate, average, clip_update, gaussian_noise, train_local, train_local_dp
from .runtime import CommandRegistry, CommandSpec, RuntimeContext

__all__ = ["default_registry", "BUDGET_COMMANDS"]

BUDGET_COMMANDS = ("enforce_dp_budget", "enforce_privacy_budget", "check_privacy_budget")


def _get_data(values, args, ctx):
    (d,) = values
    if not isinstance(d, UserDataset):
        raise TypeError("get_data expects a user dataset")
    want = args.get("data_type")
    if want is not None and want != d.data_type:
        raise ValueError(f"node holds {d.data_type!r} data, program asked for {want!r}")
    return d


def _filter(values, args, ctx):
    (d,) = values
    sensors = args.get("sensors", args.get("col", ()))
    if isinstance(sensors, str):
        sensors = (sensors,)
    return filter_columns(d, sensors)


def _geofence(values, args, ctx):
    (d,) = values
    gf = args.get("geofence")
    if isinstance(gf, str):
        gf = ctx.geofences[gf]
    elif isinstance(gf, Mapping):
        gf = Geofence(gf["lat"], gf["lon"], gf["radius_m"])
    if not isinstance(gf, Geofence):
        raise ValueError("in_geofence_cond needs a geofence name or {lat, lon, radius_m}")
    return in_geofence_cond(d, gf)


def _local_xy(d: UserDataset, ctx: RuntimeContext):
    if d.n_rows == 0:
        raise ValueError(f"user {d.user_id} has no rows after filtering")
    return d.features(ctx.feature_columns), d.labels()


def _train_local(values, args, ctx):
    # Under a DP phase the update is clipped here; noise is added either by
    # train_local_dp or, with server placement, by average.
    model, d = values
    local = train_local(model, _local_xy(d, ctx), ctx.train_cfg, ctx.task)
    update = local.flat - model.flat
    if ctx.dp_cfg is not None:
        update = clip_update(update, ctx.dp_cfg.clip_bound)
    return ModelParams(model.entries, update)


def _train_local_dp(values, args, ctx):
    model, d = values
    if ctx.dp_cfg is None:
        raise ValueError("train_local_dp needs a DP configuration")
    return train_local_dp(model, _local_xy(d, ctx), ctx.train_cfg, ctx.dp_cfg, ctx.task, ctx.noise_seed)


def _accumulate(values, args, ctx):
    partial, update = values
    return accumulate(partial, update)


def _average(values, args, ctx):
    model, total = values
    eta = float(args.get("eta", ctx.eta))
    n = int(args.get("n", ctx.n or 1))
    dp = ctx.dp_cfg
    if dp is not None and dp.placement == "server" and dp.noise_sigma > 0:
        noise = gaussian_noise(dp.noise_sigma, len(total), ctx.noise_seed)
        total = ModelParams(total.entries, total.flat + noise)
    return average(model, total, eta, n)


def _budget_check(values, args, ctx):
    max_eps = args.get("max_eps", args.get("eps"))
    if max_eps is None:
        raise ValueError("budget check needs max_eps")
    if ctx.ledger is None or ctx.origin is None:
        raise ValueError("budget check needs a ledger and a group")
    result = enforce_dp_budget(ctx.ledger, ctx.origin, float(max_eps), ctx.delta)
    if not result:
        raise BudgetExceeded(ctx.origin, result.spent, result.max_eps)
    return values[0]


def _return(values, args, ctx):
    return values[0]


def default_registry() -> CommandRegistry:
    specs = [
        CommandSpec("get_data", _get_data, 1, "local"),
        CommandSpec("filter", _filter, 1, "local"),
        CommandSpec("in_geofence_cond", _geofence, 1, "local"),
        CommandSpec("train_local", _train_local, 2, "local"),
        CommandSpec("train_local_dp", _train_local_dp, 2, "local"),
        CommandSpec("accumulate", _accumulate, 2, "global"),
        CommandSpec("average", _average, 2, "global"),
        CommandSpec("return", _return, 1, "both"),
    ]
    specs += [CommandSpec(name, _budget_check, 1, "global", obligation=True) for name in BUDGET_COMMANDS]
    return CommandRegistry(specs)

