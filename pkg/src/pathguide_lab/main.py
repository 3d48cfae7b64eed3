"""pathguide-lab command-line entry point."""

from pathguide_lab.api.commands import cli

app = cli


def main() -> None:
    app()


if __name__ == "__main__":
    main()
