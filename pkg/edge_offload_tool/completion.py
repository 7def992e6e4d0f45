"""Completion command for edge-offload-tool."""

import click
from click.shell_completion import BashComplete, FishComplete, ShellComplete, ZshComplete

PROG_NAME = "edge-offload-tool"
COMPLETE_VAR = "_EDGE_OFFLOAD_TOOL_COMPLETE"


@click.command(name="completion")
@click.argument("shell", type=click.Choice(["bash", "zsh", "fish"], case_sensitive=False))
def completion_command(shell: str) -> None:
    """Generate shell completion script.

    SHELL: The shell type (bash, zsh, fish)

    Install instructions:

    \b
    # Bash (add to ~/.bashrc):
    eval "$(edge-offload-tool completion bash)"

    \b
    # Zsh (add to ~/.zshrc):
    eval "$(edge-offload-tool completion zsh)"

    \b
    # Fish:
    edge-offload-tool completion fish > ~/.config/fish/completions/edge-offload-tool.fish
    """
    ctx = click.get_current_context()

    completion_classes: dict[str, type[ShellComplete]] = {
        "bash": BashComplete,
        "zsh": ZshComplete,
        "fish": FishComplete,
    }

    completion_class = completion_classes.get(shell.lower())
    if completion_class is None:
        raise click.BadParameter(f"Unsupported shell: {shell}")
    completer = completion_class(
        cli=ctx.find_root().command,
        ctx_args={},
        prog_name=PROG_NAME,
        complete_var=COMPLETE_VAR,
    )
    click.echo(completer.source())
