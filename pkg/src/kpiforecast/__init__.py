"""KPI forecasting for RAN telemetry logs.

Pipeline: load JSON -> extract -> impute -> split -> scale -> window ->
train stacked LSTM -> predict -> inverse-scale -> RMSE.
"""

__version__ = "0.1.0"
