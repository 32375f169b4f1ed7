from rest_framework import serializers, viewsets
from rest_framework.pagination import PageNumberPagination
from rest_framework.permissions import AllowAny, IsAuthenticated
from rest_framework.response import Response
from rest_framework.views import APIView

from .models import ExperimentRun, SweepCell


class RunPagination(PageNumberPagination):
    page_size = 20
    page_size_query_param = "page_size"
    max_page_size = 200


class SweepCellSerializer(serializers.ModelSerializer):
    class Meta:
        model = SweepCell
        fields = [
            "id",
            "run",
            "index",
            "Omega",
            "eps",
            "seed",
            "status",
            "stable",
            "bounded",
            "peak_E",
            "E_ref",
            "failure_time",
            "error_message",
            "finished_at",
        ]
        read_only_fields = fields


class ExperimentRunSerializer(serializers.ModelSerializer):
    cell_count = serializers.SerializerMethodField()

    class Meta:
        model = ExperimentRun
        fields = [
            "id",
            "kind",
            "status",
            "config",
            "config_hash",
            "output_dir",
            "summary",
            "exit_code",
            "error_message",
            "created_at",
            "started_at",
            "finished_at",
            "cell_count",
        ]
        read_only_fields = fields

    def get_cell_count(self, obj):
        return obj.cells.count()


class HealthView(APIView):
    authentication_classes = []
    permission_classes = [AllowAny]

    def get(self, request):
        return Response({"ok": True})


class ExperimentRunViewSet(viewsets.ReadOnlyModelViewSet):
    serializer_class = ExperimentRunSerializer
    permission_classes = [IsAuthenticated]
    pagination_class = RunPagination

    def get_queryset(self):
        qs = ExperimentRun.objects.all()
        kind = (self.request.query_params.get("kind") or "").strip()
        if kind:
            qs = qs.filter(kind=kind)
        status_param = (self.request.query_params.get("status") or "").strip()
        if status_param:
            statuses = [value.strip().upper() for value in status_param.split(",") if value.strip()]
            qs = qs.filter(status__in=statuses)
        config_hash = (self.request.query_params.get("config_hash") or "").strip()
        if config_hash:
            qs = qs.filter(config_hash__startswith=config_hash)
        return qs


class SweepCellViewSet(viewsets.ReadOnlyModelViewSet):
    serializer_class = SweepCellSerializer
    permission_classes = [IsAuthenticated]
    pagination_class = RunPagination

    def get_queryset(self):
        qs = SweepCell.objects.select_related("run")
        run_id = (self.request.query_params.get("run") or "").strip()
        if run_id:
            qs = qs.filter(run_id=run_id)
        return qs
