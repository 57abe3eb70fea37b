from .report_output import ReportOutput
