from typing import Iterable, Literal, Optional, Sequence

from rich.console import Console, Group
from rich.table import Table
from rich.text import Text

console = Console()


class ReportOutput:
    def __init__(
        self,
        report_type: Literal["synthesis", "training", "evaluation", "analysis", "system"],
        title: str,
        lines: Optional[Iterable[str]] = None,
        columns: Optional[Sequence[str]] = None,
        rows: Optional[Iterable[Sequence]] = None,
    ):
        """Initialize a titled report block.

        Args:
            report_type (Literal["synthesis", "training", "evaluation", "analysis", "system"]): Kind of report.
            title (str): Heading printed above the block.
            lines: Optional ``key: value`` lines.
            columns: Optional table header.
            rows: Optional table rows, rendered when `columns` is given.
        """
        self.report_type = report_type
        self.title = str(title)
        self.lines = [str(line) for line in (lines or [])]
        self.columns = list(columns or [])
        self.rows = [list(row) for row in (rows or [])]

    def status_color(self, line: str) -> str:
        value = line.partition(":")[2].strip().lower()
        if value in ("holds", "true", "feasible", "pass"):
            return "green"
        if value in ("fails", "infeasible", "fail"):
            return "red"
        if self.report_type == "system":
            return "red"
        return "default"

    @property
    def formatted_header(self) -> Text:
        return Text(f"{self.report_type.upper()} | {self.title}", style="bold")

    def table(self) -> Optional[Table]:
        if not self.columns:
            return None
        table = Table(*self.columns, show_lines=False)
        for row in self.rows:
            table.add_row(*(_cell(value) for value in row))
        return table

    def cprint(self):
        console.rule()
        body = [self.formatted_header]
        body += [Text(line, style=self.status_color(line)) for line in self.lines]
        table = self.table()
        if table is not None:
            body.append(table)
        console.print(Group(*body))


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if value is None:
        return "-"
    return str(value)
