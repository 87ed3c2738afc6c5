from typing import List, Tuple

import click


class Mutex(click.Option):
    """An option that may not be combined with the options named in `not_required_if`."""

    def __init__(self, *args, **kwargs):
        self.not_required_if: List[str] = kwargs.pop("not_required_if")

        assert self.not_required_if, "'not_required_if' parameter required"
        others = ", ".join(f"--{name}" for name in self.not_required_if)
        kwargs["help"] = (
            kwargs.get("help", "") + f"Option is mutually exclusive with {others}."
        ).strip()
        super().__init__(*args, **kwargs)

    def handle_parse_result(self, ctx, opts, args):
        if self.name in opts:
            clashes = [name for name in self.not_required_if if name in opts]
            if clashes:
                raise click.UsageError(
                    f"Illegal usage: '--{self.name}' is mutually exclusive with "
                    f"'--{clashes[0]}'"
                )
        return super().handle_parse_result(ctx, opts, args)


class Override(click.ParamType):
    """`dotted.key=value`; the value is parsed later as YAML."""

    name = "KEY=VALUE"

    def convert(self, value, param, ctx) -> Tuple[str, str]:
        if isinstance(value, tuple):
            return value
        key, sep, raw = str(value).partition("=")
        if not sep or not key.strip():
            self.fail(f"expected dotted.key=value, got {value!r}", param, ctx)
        return key.strip(), raw


class SeedList(click.ParamType):
    name = "SEEDS"

    def convert(self, value, param, ctx) -> Tuple[int, ...]:
        if isinstance(value, tuple):
            return value
        try:
            seeds = tuple(int(s) for s in str(value).split(",") if s.strip())
        except ValueError:
            self.fail(f"seeds must be comma-separated integers, got {value!r}", param, ctx)
        if not seeds:
            self.fail("at least one seed is required", param, ctx)
        if len(set(seeds)) != len(seeds):
            self.fail(f"duplicate seeds in {value!r}", param, ctx)
        return seeds
